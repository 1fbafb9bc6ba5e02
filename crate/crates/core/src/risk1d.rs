//! Wasserstein barycentric risk of a single risk factor.
//!
//! On the real line the penalized problem is a problem over quantile
//! functions: maximize `∫ Φ₀(g) − (1/2γ) ∫ (g − g_B)²` over non-decreasing
//! `g`, where `g_B` is the barycentric quantile function.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::quantile_barycenter;
use crate::error::{Error, Result};
use crate::isotonic::isotonic_in_place;
use crate::models::{quantile_expectation, PriorSet, QuantileModel, RiskMapping};
use crate::report::{Diagnostics, Maximizer, Method, RiskReport};

/// Pointwise tolerance on the first-order condition.
pub const FOC_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    #[default]
    Auto,
    Closed,
    Foc,
    Direct,
    Perturbative,
}

impl std::str::FromStr for MethodChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MethodChoice::Auto),
            "closed" | "closed-form" => Ok(MethodChoice::Closed),
            "foc" | "fixed-point" => Ok(MethodChoice::Foc),
            "direct" => Ok(MethodChoice::Direct),
            "perturbative" => Ok(MethodChoice::Perturbative),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("gamma must be positive and finite, got {gamma}")))
    }
}

fn barycenter_of(ps: &PriorSet<QuantileModel>) -> Result<QuantileModel> {
    Ok(quantile_barycenter(ps)?.model)
}

/// `(value, ∫Φ₀(g), penalty)` for a candidate quantile array `g`.
fn penalized(g_b: &QuantileModel, g: &[f64], phi: &RiskMapping, gamma: f64) -> Result<(f64, f64, f64)> {
    let q = QuantileModel::new_unchecked(g_b.grid().clone(), g.to_vec());
    let expectation = quantile_expectation(&q, phi)?;
    let penalty = q.w2_squared(g_b) / (2.0 * gamma);
    Ok((expectation - penalty, expectation, penalty))
}

/// `ρ = ∫(α + b g_B) + γb²/2`, attained at `g_B + γb`.
pub fn risk_1d_affine(ps: &PriorSet<QuantileModel>, alpha: f64, b: f64, gamma: f64) -> Result<RiskReport> {
    check_gamma(gamma)?;
    let g_b = barycenter_of(ps)?;
    let base = alpha + b * g_b.mean();
    let penalty = 0.5 * gamma * b * b;
    Ok(RiskReport {
        value: base + penalty,
        gamma,
        method: Method::ClosedForm,
        maximizer: Maximizer::Quantile(g_b.shifted(gamma * b)),
        diagnostics: Diagnostics {
            barycenter_expectation: Some(base),
            penalty: Some(penalty),
            ..Default::default()
        },
    })
}

/// Δ–Γ mapping `α + b z + ½ c z²`: the maximizer is `(g_B + γb)/λ` with
/// `λ = 1 − cγ`, which must be positive.
pub fn risk_1d_quadratic(ps: &PriorSet<QuantileModel>, alpha: f64, b: f64, c: f64, gamma: f64) -> Result<RiskReport> {
    check_gamma(gamma)?;
    if c == 0.0 {
        return risk_1d_affine(ps, alpha, b, gamma);
    }
    let lambda = 1.0 - c * gamma;
    if lambda <= 0.0 {
        return Err(Error::Unbounded { lambda });
    }
    let g_b = barycenter_of(ps)?;
    let kappa = b * gamma;
    let g: Vec<f64> = g_b.values().iter().map(|x| (x + kappa) / lambda).collect();
    let phi = RiskMapping::quadratic(alpha, b, c);
    let (value, _, penalty) = penalized(&g_b, &g, &phi, gamma)?;
    let base = quantile_expectation(&g_b, &phi)?;
    Ok(RiskReport {
        value,
        gamma,
        method: Method::ClosedForm,
        maximizer: Maximizer::Quantile(QuantileModel::new_unchecked(g_b.grid().clone(), g)),
        diagnostics: Diagnostics {
            barycenter_expectation: Some(base),
            penalty: Some(penalty),
            ..Default::default()
        },
    })
}

/// Solves `z − γΦ₀′(z) = g_B` near `g_B`. Returns the root and `|residual|`.
fn solve_foc_point(phi: &RiskMapping, gamma: f64, gb: f64) -> Result<(f64, f64)> {
    let h = |z: f64| z - gamma * phi.derivative(z) - gb;
    let radius = 10.0 * gamma.sqrt() * (1.0 + gb.abs());
    let (mut lo, mut hi) = (gb - radius, gb + radius);
    let mut grow = radius;
    let mut expansions = 0;
    while h(lo) > 0.0 || h(hi) < 0.0 {
        expansions += 1;
        if expansions > 100 || !grow.is_finite() {
            return Err(Error::NoConvergence {
                iterations: expansions,
                residual: f64::NAN,
                hint: format!("no sign change of the first-order condition around {gb}; use the direct solver"),
            });
        }
        grow *= 2.0;
        if h(lo) > 0.0 {
            lo = gb - grow;
        }
        if h(hi) < 0.0 {
            hi = gb + grow;
        }
    }
    let mut z = gb.clamp(lo, hi);
    for _ in 0..200 {
        let hz = h(z);
        if hz.abs() <= FOC_TOL {
            return Ok((z, hz.abs()));
        }
        if hz < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
            // bracket exhausted at working precision
            return Ok((z, hz.abs()));
        }
        let slope = 1.0 - gamma * phi.second_derivative(z);
        let newton = z - hz / slope;
        z = if slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    let hz = h(z);
    Err(Error::NoConvergence {
        iterations: 200,
        residual: hz.abs(),
        hint: "first-order condition; use the direct solver".into(),
    })
}

/// Solves the first-order condition `g − γΦ₀′(g) − g_B = 0` pointwise.
pub fn risk_1d_foc(ps: &PriorSet<QuantileModel>, phi: &RiskMapping, gamma: f64) -> Result<RiskReport> {
    check_gamma(gamma)?;
    phi.check_dim(1)?;
    let g_b = barycenter_of(ps)?;
    let solved: Vec<(f64, f64)> = g_b
        .values()
        .par_iter()
        .map(|&gb| solve_foc_point(phi, gamma, gb))
        .collect::<Result<_>>()?;
    let g: Vec<f64> = solved.iter().map(|p| p.0).collect();
    let residual = solved.iter().map(|p| p.1).fold(0.0, f64::max);
    if let Some(j) = (1..g.len()).find(|&j| g[j] < g[j - 1]) {
        return Err(Error::NotMonotone { index: j });
    }
    // a root where z − γΦ₀′(z) decreases is a minimum of the pointwise objective
    if let Some(j) = g.iter().position(|&z| 1.0 - gamma * phi.second_derivative(z) <= 0.0) {
        return Err(Error::NotMonotone { index: j });
    }
    let (value, _, penalty) = penalized(&g_b, &g, phi, gamma)?;
    let base = quantile_expectation(&g_b, phi)?;
    Ok(RiskReport {
        value,
        gamma,
        method: Method::Foc,
        maximizer: Maximizer::Quantile(QuantileModel::new_unchecked(g_b.grid().clone(), g)),
        diagnostics: Diagnostics {
            residual,
            barycenter_expectation: Some(base),
            penalty: Some(penalty),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DirectOptions {
    /// Stop when the objective moves less than `tol · max(1, |J|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DirectOptions {
    fn default() -> Self {
        DirectOptions {
            tol: 1e-12,
            max_iter: 200_000,
        }
    }
}

/// Maximizes the discretized objective over monotone arrays by projected
/// gradient ascent with backtracking.
pub fn risk_1d_direct(ps: &PriorSet<QuantileModel>, phi: &RiskMapping, gamma: f64) -> Result<RiskReport> {
    risk_1d_direct_with(ps, phi, gamma, DirectOptions::default())
}

pub fn risk_1d_direct_with(
    ps: &PriorSet<QuantileModel>,
    phi: &RiskMapping,
    gamma: f64,
    opts: DirectOptions,
) -> Result<RiskReport> {
    check_gamma(gamma)?;
    phi.check_dim(1)?;
    let g_b = barycenter_of(ps)?;
    let b = g_b.values();
    let w = g_b.grid().weights();
    let objective = |g: &[f64]| -> f64 {
        g.iter()
            .zip(b)
            .zip(w)
            .map(|((&x, &y), &wj)| wj * (phi.eval_scalar(x) - (x - y) * (x - y) / (2.0 * gamma)))
            .sum()
    };
    let curvature = b.iter().map(|&x| phi.second_derivative(x).abs()).fold(0.0, f64::max);
    let mut step = 1.0 / (1.0 / gamma + curvature);
    let mut g = b.to_vec();
    let mut j_cur = objective(&g);
    let mut repairs = 0;
    let mut iterations = 0;
    let mut grad = vec![0.0; g.len()];
    let mut trial = vec![0.0; g.len()];
    loop {
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: f64::NAN,
                hint: "projected ascent; raise the iteration cap".into(),
            });
        }
        iterations += 1;
        for ((gr, &x), &y) in grad.iter_mut().zip(&g).zip(b) {
            *gr = phi.derivative(x) - (x - y) / gamma;
        }
        let mut halvings = 0;
        let (j_new, repaired) = loop {
            for ((t, &x), &gr) in trial.iter_mut().zip(&g).zip(&grad) {
                *t = x + step * gr;
            }
            let repaired = isotonic_in_place(&mut trial, w);
            let j_new = objective(&trial);
            if !j_new.is_finite() || trial.iter().any(|x| !x.is_finite() || x.abs() > 1e150) {
                return Err(Error::Divergence {
                    iterations,
                    hint: "objective unbounded on the grid; the risk measure is infinite for this gamma".into(),
                });
            }
            let mut lin = 0.0;
            let mut dist = 0.0;
            for (((t, x), gr), wj) in trial.iter().zip(&g).zip(&grad).zip(w) {
                lin += wj * gr * (t - x);
                dist += wj * (t - x) * (t - x);
            }
            let slack = 1e-14 * j_cur.abs().max(1.0);
            if j_new >= j_cur + lin - dist / (2.0 * step) - slack {
                break (j_new, repaired);
            }
            step *= 0.5;
            halvings += 1;
            if halvings > 60 {
                return Err(Error::Numerical("projected ascent step collapsed".into()));
            }
        };
        if repaired {
            repairs += 1;
        }
        let change = j_new - j_cur;
        std::mem::swap(&mut g, &mut trial);
        j_cur = j_new;
        if change.abs() < opts.tol * j_cur.abs().max(1.0) {
            break;
        }
    }
    let (value, _, penalty) = penalized(&g_b, &g, phi, gamma)?;
    let base = quantile_expectation(&g_b, phi)?;
    Ok(RiskReport {
        value,
        gamma,
        method: Method::Direct,
        maximizer: Maximizer::Quantile(QuantileModel::new_unchecked(g_b.grid().clone(), g)),
        diagnostics: Diagnostics {
            iterations,
            monotonicity_repairs: repairs,
            barycenter_expectation: Some(base),
            penalty: Some(penalty),
            ..Default::default()
        },
    })
}

/// First-order expansion `∫ Φ₀(g_B) + (γ/2) Φ₀′(g_B)²`. Accepts `γ = 0`.
pub fn risk_1d_perturbative(ps: &PriorSet<QuantileModel>, phi: &RiskMapping, gamma: f64) -> Result<RiskReport> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma must be non-negative and finite, got {gamma}")));
    }
    phi.check_dim(1)?;
    let g_b = barycenter_of(ps)?;
    let base = quantile_expectation(&g_b, phi)?;
    let slopes: Vec<f64> = g_b.values().iter().map(|&x| phi.derivative(x)).collect();
    let sq: Vec<f64> = slopes.iter().map(|d| d * d).collect();
    let correction = 0.5 * gamma * g_b.grid().integrate(&sq);
    let mut g: Vec<f64> = g_b.values().iter().zip(&slopes).map(|(x, d)| x + gamma * d).collect();
    let repaired = isotonic_in_place(&mut g, g_b.grid().weights());
    Ok(RiskReport {
        value: base + correction,
        gamma,
        method: Method::Perturbative,
        maximizer: Maximizer::Quantile(QuantileModel::new_unchecked(g_b.grid().clone(), g)),
        diagnostics: Diagnostics {
            monotonicity_repairs: repaired as usize,
            barycenter_expectation: Some(base),
            penalty: Some(correction),
            ..Default::default()
        },
    })
}

/// Dispatches on `method`. `Auto` takes the closed form when the mapping
/// has one, then the first-order condition, then the direct solver.
pub fn risk_1d(ps: &PriorSet<QuantileModel>, phi: &RiskMapping, gamma: f64, method: MethodChoice) -> Result<RiskReport> {
    match method {
        MethodChoice::Closed => match *phi {
            RiskMapping::Affine { alpha, b } => risk_1d_affine(ps, alpha, b, gamma),
            RiskMapping::Quadratic { alpha, b, c } => risk_1d_quadratic(ps, alpha, b, c, gamma),
            _ => Err(Error::Invalid(format!(
                "no closed form for a {} mapping; use foc, direct or perturbative",
                phi.tag()
            ))),
        },
        MethodChoice::Foc => risk_1d_foc(ps, phi, gamma),
        MethodChoice::Direct => risk_1d_direct(ps, phi, gamma),
        MethodChoice::Perturbative => risk_1d_perturbative(ps, phi, gamma),
        MethodChoice::Auto => match phi {
            RiskMapping::Affine { .. } | RiskMapping::Quadratic { .. } => risk_1d(ps, phi, gamma, MethodChoice::Closed),
            _ => match risk_1d_foc(ps, phi, gamma) {
                Ok(r) => Ok(r),
                Err(Error::NotMonotone { .. }) | Err(Error::NoConvergence { .. }) => {
                    let mut r = risk_1d_direct(ps, phi, gamma)?;
                    r.diagnostics.notes.push("first-order solver failed; fell back to direct".into());
                    Ok(r)
                }
                Err(e) => Err(e),
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{QuantileGrid, DEFAULT_GRID_SIZE};

    fn two_normals() -> PriorSet<QuantileModel> {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        PriorSet::uniform(vec![
            QuantileModel::normal(g.clone(), 0.0, 1.0).unwrap(),
            QuantileModel::normal(g, 2.0, 1.0).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn affine_closed_form() {
        let ps = two_normals();
        let r = risk_1d_affine(&ps, 0.0, 1.0, 0.1).unwrap();
        assert!((r.value - 1.05).abs() < 1e-12, "{}", r.value);
        let g = r.quantile_maximizer().unwrap();
        let expect = QuantileModel::normal(g.grid().clone(), 1.1, 1.0).unwrap();
        for (x, y) in g.values().iter().zip(expect.values()) {
            assert!((x - y).abs() < 1e-6);
        }
        let d = risk_1d_direct(&ps, &RiskMapping::affine(0.0, 1.0), 0.1).unwrap();
        assert!((d.value - r.value).abs() < 1e-5);
    }

    #[test]
    fn zero_exposure_is_cash() {
        let ps = two_normals();
        for gamma in [0.01, 1.0, 10.0] {
            assert_eq!(risk_1d_affine(&ps, 2.5, 0.0, gamma).unwrap().value, 2.5);
        }
    }

    #[test]
    fn quadratic_matches_direct_and_foc() {
        let ps = two_normals();
        let closed = risk_1d_quadratic(&ps, 0.0, 0.0, 0.5, 0.2).unwrap();
        let phi = RiskMapping::quadratic(0.0, 0.0, 0.5);
        let direct = risk_1d_direct(&ps, &phi, 0.2).unwrap();
        assert!((closed.value - direct.value).abs() < 1e-5, "{} vs {}", closed.value, direct.value);
        let foc = risk_1d_foc(&ps, &phi, 0.2).unwrap();
        assert!((closed.value - foc.value).abs() < 1e-8);
    }

    #[test]
    fn quadratic_at_the_boundary_is_infinite() {
        let ps = two_normals();
        assert!(matches!(risk_1d_quadratic(&ps, 0.0, 0.0, 1.0, 1.0), Err(Error::Unbounded { .. })));
    }

    #[test]
    fn zero_curvature_reduces_to_affine() {
        let ps = two_normals();
        let a = risk_1d_affine(&ps, 0.3, -1.2, 0.05).unwrap();
        let q = risk_1d_quadratic(&ps, 0.3, -1.2, 0.0, 0.05).unwrap();
        assert_eq!(a.value, q.value);
    }

    #[test]
    fn foc_reproduces_affine_maximizer() {
        let ps = two_normals();
        let closed = risk_1d_affine(&ps, 1.0, 2.0, 0.1).unwrap();
        let foc = risk_1d_foc(&ps, &RiskMapping::affine(1.0, 2.0), 0.1).unwrap();
        for (x, y) in foc.quantile_maximizer().unwrap().values().iter().zip(closed.quantile_maximizer().unwrap().values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softplus_foc_against_direct() {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        let ps = PriorSet::uniform(vec![
            QuantileModel::normal(g.clone(), 0.0, 1.0).unwrap(),
            QuantileModel::normal(g, 1.0, 1.0).unwrap(),
        ])
        .unwrap();
        let phi = RiskMapping::softplus(vec![1.0]);
        let foc = risk_1d_foc(&ps, &phi, 0.1).unwrap();
        assert!(foc.diagnostics.residual < 1e-10);
        let direct = risk_1d_direct(&ps, &phi, 0.1).unwrap();
        assert!((foc.value - direct.value).abs() < 1e-5, "{} vs {}", foc.value, direct.value);
    }

    #[test]
    fn direct_decreases_with_gamma() {
        let ps = two_normals();
        let phi = RiskMapping::softplus(vec![1.0]);
        let base = quantile_expectation(&quantile_barycenter(&ps).unwrap().model, &phi).unwrap();
        let values: Vec<f64> = [0.1, 0.01, 0.001].iter().map(|&g| risk_1d_direct(&ps, &phi, g).unwrap().value).collect();
        assert!(values[0] > values[1] && values[1] > values[2] && values[2] > base);
        assert!(values[2] - base < 1e-3);
    }

    #[test]
    fn single_prior_maximizer_approaches_prior() {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        let q = QuantileModel::normal(g, 0.5, 2.0).unwrap();
        let ps = PriorSet::uniform(vec![q.clone()]).unwrap();
        let phi = RiskMapping::softplus(vec![1.0]);
        let dist: Vec<f64> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&gamma| risk_1d_direct(&ps, &phi, gamma).unwrap().quantile_maximizer().unwrap().w2_squared(&q))
            .collect();
        assert!(dist[0] > dist[1] && dist[1] > dist[2]);
    }

    #[test]
    fn perturbative_is_exact_for_affine() {
        let ps = two_normals();
        let phi = RiskMapping::affine(0.5, 3.0);
        let p = risk_1d_perturbative(&ps, &phi, 0.2).unwrap();
        let c = risk_1d_affine(&ps, 0.5, 3.0, 0.2).unwrap();
        assert!((p.value - c.value).abs() < 1e-12);
        let zero = risk_1d_perturbative(&ps, &phi, 0.0).unwrap();
        assert_eq!(zero.value, zero.diagnostics.barycenter_expectation.unwrap());
    }

    #[test]
    fn perturbative_error_is_second_order() {
        let ps = two_normals();
        let phi = RiskMapping::softplus(vec![1.0]);
        let gap = |gamma: f64| {
            let p = risk_1d_perturbative(&ps, &phi, gamma).unwrap().value;
            let d = risk_1d_foc(&ps, &phi, gamma).unwrap().value;
            (p - d).abs()
        };
        let ratio = gap(0.1) / gap(0.05);
        assert!((3.3..=4.7).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn steep_mapping_fails_monotonicity() {
        // z ↦ z − γΦ₀′(z) folds over when γΦ₀″ exceeds one
        let ps = two_normals();
        let phi = RiskMapping::polynomial(vec![0.0, 0.0, 0.0, 1.0]);
        let err = risk_1d_foc(&ps, &phi, 0.5).unwrap_err();
        assert!(matches!(err, Error::NotMonotone { .. } | Error::NoConvergence { .. }), "{err}");
    }
}
