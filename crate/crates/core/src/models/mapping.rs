use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type EvalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Relative central-difference step used when a mapping has no gradient.
pub const FD_STEP: f64 = 1e-6;

/// A user-supplied loss function `z ↦ Φ₀(z)`, optionally with its gradient.
#[derive(Clone)]
pub struct CustomMapping {
    label: String,
    dim: Option<usize>,
    eval: EvalFn,
    grad: Option<GradFn>,
    second: Option<ScalarFn>,
}

impl CustomMapping {
    pub fn new(label: impl Into<String>, eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CustomMapping {
            label: label.into(),
            dim: None,
            eval: Arc::new(eval),
            grad: None,
            second: None,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    /// Exact second derivative, only meaningful for scalar mappings.
    pub fn with_second_derivative(mut self, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.second = Some(Arc::new(f));
        self
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.dim = Some(d);
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for CustomMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomMapping")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("gradient", &self.grad.is_some())
            .finish()
    }
}

/// The loss of a position as a function of the risk factors, `−X = Φ₀(Z)`.
///
/// `Quadratic` follows the Δ–Γ convention `α + b z + ½ c z²`, so `c` is the
/// second derivative of the loss.
#[derive(Debug, Clone)]
pub enum RiskMapping {
    Affine { alpha: f64, b: f64 },
    Quadratic { alpha: f64, b: f64, c: f64 },
    /// `⟨a, z⟩`
    LinearMulti { a: DVector<f64> },
    /// `⟨a, z⟩ + ⟨z, A z⟩` with `A` symmetric.
    QuadraticMulti { a: DVector<f64>, q: DMatrix<f64> },
    Custom(CustomMapping),
}

impl RiskMapping {
    pub fn affine(alpha: f64, b: f64) -> Self {
        RiskMapping::Affine { alpha, b }
    }

    pub fn quadratic(alpha: f64, b: f64, c: f64) -> Self {
        RiskMapping::Quadratic { alpha, b, c }
    }

    pub fn linear_multi(a: DVector<f64>) -> Self {
        RiskMapping::LinearMulti { a }
    }

    /// Builds `⟨a, z⟩ + ⟨z, A z⟩`, replacing `A` by its symmetric part.
    pub fn quadratic_multi(a: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        if q.nrows() != a.len() || q.ncols() != a.len() {
            return Err(Error::Dimension(format!(
                "quadratic-multi: a has length {} but A is {}x{}",
                a.len(),
                q.nrows(),
                q.ncols()
            )));
        }
        let q = (&q + q.transpose()) * 0.5;
        Ok(RiskMapping::QuadraticMulti { a, q })
    }

    pub fn custom(c: CustomMapping) -> Self {
        RiskMapping::Custom(c)
    }

    /// `log(1 + exp(⟨a, z⟩))` with exact derivatives.
    pub fn softplus(a: Vec<f64>) -> Self {
        let d = a.len();
        let a_eval = a.clone();
        let a_grad = a.clone();
        let a2 = a.iter().map(|x| x * x).sum::<f64>();
        let c = CustomMapping::new("softplus", move |z: &[f64]| softplus(dot(&a_eval, z)))
            .with_gradient(move |z: &[f64], out: &mut [f64]| {
                let s = logistic(dot(&a_grad, z));
                for (o, ak) in out.iter_mut().zip(&a_grad) {
                    *o = s * ak;
                }
            })
            .with_second_derivative(move |t: f64| {
                // only used for d = 1, where ⟨a,z⟩ = a z
                let s = logistic(t * a2.sqrt());
                s * (1.0 - s) * a2
            })
            .with_dim(d);
        RiskMapping::Custom(c)
    }

    /// `scale · exp(⟨a, z⟩)`.
    pub fn exponential(scale: f64, a: Vec<f64>) -> Self {
        let d = a.len();
        let a_eval = a.clone();
        let a_grad = a.clone();
        let a2 = a.iter().map(|x| x * x).sum::<f64>();
        let c = CustomMapping::new("exponential", move |z: &[f64]| scale * dot(&a_eval, z).exp())
            .with_gradient(move |z: &[f64], out: &mut [f64]| {
                let e = scale * dot(&a_grad, z).exp();
                for (o, ak) in out.iter_mut().zip(&a_grad) {
                    *o = e * ak;
                }
            })
            .with_second_derivative(move |t: f64| scale * a2 * (t * a2.sqrt()).exp())
            .with_dim(d);
        RiskMapping::Custom(c)
    }

    /// Scalar polynomial `Σ cₖ zᵏ`.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let c_eval = coeffs.clone();
        let c_grad = coeffs.clone();
        let c_sec = coeffs;
        let c = CustomMapping::new("polynomial", move |z: &[f64]| horner(&c_eval, z[0]))
            .with_gradient(move |z: &[f64], out: &mut [f64]| out[0] = poly_derivative(&c_grad, z[0], 1))
            .with_second_derivative(move |t: f64| poly_derivative(&c_sec, t, 2))
            .with_dim(1);
        RiskMapping::Custom(c)
    }

    /// `Π zₖ`, e.g. claim count times claim size.
    pub fn product(d: usize) -> Self {
        let c = CustomMapping::new("product", |z: &[f64]| z.iter().product())
            .with_gradient(|z: &[f64], out: &mut [f64]| {
                for (k, o) in out.iter_mut().enumerate().take(z.len()) {
                    *o = z.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, v)| v).product();
                }
            })
            .with_dim(d);
        RiskMapping::Custom(c)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            RiskMapping::Affine { .. } => "affine",
            RiskMapping::Quadratic { .. } => "quadratic",
            RiskMapping::LinearMulti { .. } => "linear-multi",
            RiskMapping::QuadraticMulti { .. } => "quadratic-multi",
            RiskMapping::Custom(_) => "custom",
        }
    }

    /// Factor dimension the mapping expects, when it is fixed.
    pub fn dim(&self) -> Option<usize> {
        match self {
            RiskMapping::Affine { .. } | RiskMapping::Quadratic { .. } => Some(1),
            RiskMapping::LinearMulti { a } | RiskMapping::QuadraticMulti { a, .. } => Some(a.len()),
            RiskMapping::Custom(c) => c.dim,
        }
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        match self.dim() {
            Some(k) if k != d => Err(Error::Dimension(format!(
                "{} mapping expects {} factors, model has {}",
                self.tag(),
                k,
                d
            ))),
            _ => Ok(()),
        }
    }

    pub fn has_exact_gradient(&self) -> bool {
        match self {
            RiskMapping::Custom(c) => c.grad.is_some(),
            _ => true,
        }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            RiskMapping::Affine { alpha, b } => alpha + b * z[0],
            RiskMapping::Quadratic { alpha, b, c } => alpha + b * z[0] + 0.5 * c * z[0] * z[0],
            RiskMapping::LinearMulti { a } => dot(a.as_slice(), z),
            RiskMapping::QuadraticMulti { a, q } => {
                let zv = DVector::from_column_slice(z);
                a.dot(&zv) + zv.dot(&(q * &zv))
            }
            RiskMapping::Custom(c) => (c.eval)(z),
        }
    }

    /// Writes `∇Φ₀(z)` into `out`; central differences when no gradient was supplied.
    pub fn gradient_into(&self, z: &[f64], out: &mut [f64]) {
        match self {
            RiskMapping::Affine { b, .. } => out[0] = *b,
            RiskMapping::Quadratic { b, c, .. } => out[0] = b + c * z[0],
            RiskMapping::LinearMulti { a } => out.copy_from_slice(a.as_slice()),
            RiskMapping::QuadraticMulti { a, q } => {
                let zv = DVector::from_column_slice(z);
                let g = a + 2.0 * (q * zv);
                out.copy_from_slice(g.as_slice());
            }
            RiskMapping::Custom(c) => match &c.grad {
                Some(g) => g(z, out),
                None => finite_difference_gradient(&*c.eval, z, out),
            },
        }
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.gradient_into(z, &mut out);
        out
    }

    pub fn eval_scalar(&self, z: f64) -> f64 {
        self.eval(&[z])
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let mut out = [0.0];
        self.gradient_into(&[z], &mut out);
        out[0]
    }

    pub fn second_derivative(&self, z: f64) -> f64 {
        match self {
            RiskMapping::Affine { .. } => 0.0,
            RiskMapping::Quadratic { c, .. } => *c,
            RiskMapping::Custom(CustomMapping { second: Some(f), .. }) => f(z),
            _ => {
                let h = 1e-4 * (1.0 + z.abs());
                (self.derivative(z + h) - self.derivative(z - h)) / (2.0 * h)
            }
        }
    }

    /// The mapping of the position after adding cash `kappa`: `Φ₀ − κ`.
    pub fn shift_cash(&self, kappa: f64) -> RiskMapping {
        match self {
            RiskMapping::Affine { alpha, b } => RiskMapping::Affine { alpha: alpha - kappa, b: *b },
            RiskMapping::Quadratic { alpha, b, c } => RiskMapping::Quadratic {
                alpha: alpha - kappa,
                b: *b,
                c: *c,
            },
            other => {
                let inner = other.clone();
                let inner_grad = other.clone();
                let mut c = CustomMapping::new(format!("{}-cash", other.tag()), move |z: &[f64]| inner.eval(z) - kappa)
                    .with_gradient(move |z: &[f64], out: &mut [f64]| inner_grad.gradient_into(z, out));
                c.dim = other.dim();
                if let RiskMapping::Custom(orig) = other {
                    c.second = orig.second.clone();
                }
                RiskMapping::Custom(c)
            }
        }
    }

    /// `Σ θₖ Φ₀ₖ`. Linear and quadratic tags are combined in closed form so
    /// their exact moment paths survive.
    pub fn portfolio(parts: &[(f64, RiskMapping)]) -> Result<RiskMapping> {
        if parts.is_empty() {
            return Err(Error::Invalid("empty portfolio".into()));
        }
        let dims: Vec<Option<usize>> = parts.iter().map(|(_, m)| m.dim()).collect();
        let dim = dims.iter().flatten().copied().next();
        if dims.iter().flatten().any(|&d| Some(d) != dim) {
            return Err(Error::Dimension("portfolio sectors have different factor dimensions".into()));
        }
        let all_multi = parts
            .iter()
            .all(|(_, m)| matches!(m, RiskMapping::LinearMulti { .. } | RiskMapping::QuadraticMulti { .. }));
        if all_multi {
            let d = dim.expect("multi mappings have a dimension");
            let mut a = DVector::zeros(d);
            let mut q = DMatrix::zeros(d, d);
            let mut quadratic = false;
            for (theta, m) in parts {
                match m {
                    RiskMapping::LinearMulti { a: ak } => a += ak * *theta,
                    RiskMapping::QuadraticMulti { a: ak, q: qk } => {
                        a += ak * *theta;
                        q += qk * *theta;
                        quadratic = true;
                    }
                    _ => unreachable!(),
                }
            }
            return Ok(if quadratic {
                RiskMapping::QuadraticMulti { a, q }
            } else {
                RiskMapping::LinearMulti { a }
            });
        }
        let all_scalar = parts
            .iter()
            .all(|(_, m)| matches!(m, RiskMapping::Affine { .. } | RiskMapping::Quadratic { .. }));
        if all_scalar {
            let (mut alpha, mut b, mut c) = (0.0, 0.0, 0.0);
            for (theta, m) in parts {
                match m {
                    RiskMapping::Affine { alpha: a0, b: b0 } => {
                        alpha += theta * a0;
                        b += theta * b0;
                    }
                    RiskMapping::Quadratic { alpha: a0, b: b0, c: c0 } => {
                        alpha += theta * a0;
                        b += theta * b0;
                        c += theta * c0;
                    }
                    _ => unreachable!(),
                }
            }
            return Ok(if c == 0.0 {
                RiskMapping::Affine { alpha, b }
            } else {
                RiskMapping::Quadratic { alpha, b, c }
            });
        }
        let eval_parts: Vec<(f64, RiskMapping)> = parts.to_vec();
        let grad_parts = eval_parts.clone();
        let mut c = CustomMapping::new("portfolio", move |z: &[f64]| {
            eval_parts.iter().map(|(t, m)| t * m.eval(z)).sum()
        })
        .with_gradient(move |z: &[f64], out: &mut [f64]| {
            out.iter_mut().for_each(|o| *o = 0.0);
            let mut buf = vec![0.0; z.len()];
            for (t, m) in &grad_parts {
                m.gradient_into(z, &mut buf);
                for (o, g) in out.iter_mut().zip(&buf) {
                    *o += t * g;
                }
            }
        });
        c.dim = dim;
        Ok(RiskMapping::Custom(c))
    }
}

fn finite_difference_gradient(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), z: &[f64], out: &mut [f64]) {
    let mut x = z.to_vec();
    for k in 0..z.len() {
        let h = FD_STEP * (1.0 + z[k].abs());
        x[k] = z[k] + h;
        let up = f(&x);
        x[k] = z[k] - h;
        let down = f(&x);
        x[k] = z[k];
        out[k] = (up - down) / (2.0 * h);
    }
}

fn dot(a: &[f64], z: &[f64]) -> f64 {
    a.iter().zip(z).map(|(x, y)| x * y).sum()
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn horner(c: &[f64], z: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ck| acc * z + ck)
}

fn poly_derivative(c: &[f64], z: f64, order: usize) -> f64 {
    let mut coeffs: Vec<f64> = c.to_vec();
    for _ in 0..order {
        if coeffs.len() <= 1 {
            return 0.0;
        }
        coeffs = coeffs.iter().enumerate().skip(1).map(|(k, ck)| k as f64 * ck).collect();
    }
    horner(&coeffs, z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_follows_delta_gamma_convention() {
        let m = RiskMapping::quadratic(1.0, 2.0, 3.0);
        assert_eq!(m.eval_scalar(2.0), 1.0 + 4.0 + 6.0);
        assert_eq!(m.derivative(2.0), 2.0 + 6.0);
        assert_eq!(m.second_derivative(0.3), 3.0);
    }

    #[test]
    fn finite_difference_fallback_matches_exact() {
        let exact = RiskMapping::softplus(vec![0.7, -1.2]);
        let RiskMapping::Custom(c) = &exact else { unreachable!() };
        let eval = c.eval.clone();
        let fd = RiskMapping::custom(CustomMapping::new("fd", move |z: &[f64]| eval(z)));
        let z = [0.3, -0.4];
        let g1 = exact.gradient(&z);
        let g2 = fd.gradient(&z);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn quadratic_multi_is_symmetrized() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let RiskMapping::QuadraticMulti { q, .. } = RiskMapping::quadratic_multi(DVector::zeros(2), q).unwrap() else {
            unreachable!()
        };
        assert_eq!(q[(0, 1)], 1.0);
        assert_eq!(q[(1, 0)], 1.0);
    }

    #[test]
    fn portfolio_keeps_closed_forms() {
        let p = RiskMapping::portfolio(&[
            (2.0, RiskMapping::linear_multi(nalgebra::dvector![1.0, 0.0])),
            (1.0, RiskMapping::linear_multi(nalgebra::dvector![0.0, 3.0])),
        ])
        .unwrap();
        match p {
            RiskMapping::LinearMulti { a } => assert_eq!(a, nalgebra::dvector![2.0, 3.0]),
            other => panic!("expected linear-multi, got {}", other.tag()),
        }
        let mixed = RiskMapping::portfolio(&[
            (1.0, RiskMapping::softplus(vec![1.0])),
            (1.0, RiskMapping::affine(0.0, 2.0)),
        ])
        .unwrap();
        assert_eq!(mixed.tag(), "custom");
        assert!((mixed.eval_scalar(0.0) - (2f64.ln())).abs() < 1e-15);
        assert!((mixed.derivative(0.0) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn cash_shift_lowers_every_value() {
        for m in [
            RiskMapping::affine(1.0, 2.0),
            RiskMapping::softplus(vec![1.0]),
            RiskMapping::linear_multi(nalgebra::dvector![1.0]),
        ] {
            let s = m.shift_cash(0.75);
            assert!((m.eval(&[0.4]) - s.eval(&[0.4]) - 0.75).abs() < 1e-15);
            assert_eq!(m.gradient(&[0.4]), s.gradient(&[0.4]));
        }
    }
}
