//! Weighted isotonic regression by pool-adjacent-violators.

/// Replaces `y` by its weighted least-squares projection onto
/// non-decreasing sequences. Returns `true` if anything moved.
pub fn isotonic_in_place(y: &mut [f64], w: &[f64]) -> bool {
    assert_eq!(y.len(), w.len());
    if y.windows(2).all(|p| p[0] <= p[1]) {
        return false;
    }
    // blocks as (mean, weight, length)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let wsum = w1 + w2;
            let mean = if wsum > 0.0 { (w1 * m1 + w2 * m2) / wsum } else { 0.5 * (m1 + m2) };
            *blocks.last_mut().unwrap() = (mean, wsum, n1 + n2);
        }
    }
    let mut k = 0;
    for (mean, _, n) in blocks {
        y[k..k + n].iter_mut().for_each(|v| *v = mean);
        k += n;
    }
    true
}

pub fn isotonic_regression(y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = y.to_vec();
    isotonic_in_place(&mut out, w);
    out
}
