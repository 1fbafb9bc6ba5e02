//! Wasserstein barycentric risk for location-scatter priors in `d` factors.
//!
//! The maximizing model is again location-scatter, so the problem reduces
//! to `(m, S)`:
//!
//! ```text
//! sup  Φ(m,S) − (1/2γ) (‖m − m_B‖² + F⁰(S))
//! ```
//!
//! with `Φ(m,S) = E[Φ₀(m + S^{1/2} Z₀)]` and `F⁰` the scatter part of the
//! normalized Fréchet function.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{barycentric_map, ls_frechet_parts, ls_wasserstein_barycenter, spd_iterate, DEFAULT_MAX_ITER};
use crate::error::{Error, Result};
use crate::models::{CentralLaw, LocationScatterModel, PriorSet, RiskMapping};
use crate::report::{Diagnostics, Maximizer, Method, RiskReport};
use crate::spd::{sqrt_psd_product, sqrt_spd, symmetrize, SpdMatrix, SylvesterSolver};

pub const DEFAULT_SAMPLES: usize = 200_000;
const CHUNK: usize = 4096;

/// `Φ` and its derivatives in `m` and `S` at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiEval {
    pub value: f64,
    pub grad_m: DVector<f64>,
    /// `D_SΦ`, symmetric, with `DΦ(m,S)[Ṡ] = Tr(D_SΦ Ṡ)`.
    pub grad_s: DMatrix<f64>,
    pub stderr: f64,
    pub grad_m_stderr: DVector<f64>,
    pub exact: bool,
}

/// Antithetic draws of `Z₀`, shared across every evaluation of one solve.
#[derive(Debug, Clone)]
pub struct Draws {
    z0: DMatrix<f64>,
}

impl Draws {
    pub fn new(law: CentralLaw, d: usize, n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < 2 {
            return Err(Error::Invalid("need at least 2 Monte Carlo samples".into()));
        }
        Ok(Draws {
            z0: law.antithetic_matrix(d, n_samples, seed),
        })
    }

    pub fn len(&self) -> usize {
        self.z0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.z0.ncols() == 0
    }
}

fn needs_sampling(phi: &RiskMapping) -> bool {
    matches!(phi, RiskMapping::Custom(_))
}

fn exact_eval(m: &DVector<f64>, s: &SpdMatrix, phi: &RiskMapping) -> Option<PhiEval> {
    let d = m.len();
    let sm = s.as_matrix();
    let (value, grad_m, grad_s) = match phi {
        RiskMapping::Affine { alpha, b } => (alpha + b * m[0], DVector::from_element(1, *b), DMatrix::zeros(1, 1)),
        RiskMapping::Quadratic { alpha, b, c } => (
            alpha + b * m[0] + 0.5 * c * (m[0] * m[0] + sm[(0, 0)]),
            DVector::from_element(1, b + c * m[0]),
            DMatrix::from_element(1, 1, 0.5 * c),
        ),
        RiskMapping::LinearMulti { a } => (a.dot(m), a.clone(), DMatrix::zeros(d, d)),
        RiskMapping::QuadraticMulti { a, q } => (
            a.dot(m) + m.dot(&(q * m)) + (q * sm).trace(),
            a + 2.0 * (q * m),
            q.clone(),
        ),
        RiskMapping::Custom(_) => return None,
    };
    Some(PhiEval {
        value,
        grad_m,
        grad_s,
        stderr: 0.0,
        grad_m_stderr: DVector::zeros(d),
        exact: true,
    })
}

struct Partial {
    value: f64,
    value_sq: f64,
    grad: Vec<f64>,
    grad_sq: Vec<f64>,
    psi: DMatrix<f64>,
}

/// Evaluates `Φ`, `D_mΦ`, `D_SΦ` at `(m, S)`, sampling only when the
/// mapping has no exact moments.
pub(crate) fn eval_at(m: &DVector<f64>, s: &SpdMatrix, phi: &RiskMapping, draws: Option<&Draws>) -> Result<PhiEval> {
    if let Some(e) = exact_eval(m, s, phi) {
        return Ok(e);
    }
    let draws = draws.ok_or_else(|| Error::Invalid("custom mapping needs Monte Carlo draws".into()))?;
    let d = m.len();
    let r = sqrt_spd(s);
    let z0 = &draws.z0;
    let n = z0.ncols();
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut p = Partial {
                value: 0.0,
                value_sq: 0.0,
                grad: vec![0.0; d],
                grad_sq: vec![0.0; d],
                psi: DMatrix::zeros(d, d),
            };
            let mut x = vec![0.0; d];
            let mut g = vec![0.0; d];
            let mut pair_v = 0.0;
            let mut pair_g = vec![0.0; d];
            for k in lo..hi {
                let zk = z0.column(k);
                for i in 0..d {
                    x[i] = m[i] + (0..d).map(|j| r.as_matrix()[(i, j)] * zk[j]).sum::<f64>();
                }
                let v = phi.eval(&x);
                phi.gradient_into(&x, &mut g);
                if !v.is_finite() || g.iter().any(|t| !t.is_finite()) {
                    return Err(Error::Evaluation {
                        point: format!("{x:?}"),
                        reason: "non-finite mapping value or gradient".into(),
                    });
                }
                p.value += v;
                pair_v += 0.5 * v;
                for l in 0..d {
                    p.grad[l] += g[l];
                    pair_g[l] += 0.5 * g[l];
                    for kk in 0..d {
                        p.psi[(l, kk)] += g[l] * zk[kk];
                    }
                }
                if k % 2 == 1 {
                    p.value_sq += pair_v * pair_v;
                    pair_v = 0.0;
                    for (sq, g) in p.grad_sq.iter_mut().zip(pair_g.iter_mut()) {
                        *sq += *g * *g;
                        *g = 0.0;
                    }
                }
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let mut value = 0.0;
    let mut value_sq = 0.0;
    let mut grad = DVector::zeros(d);
    let mut grad_sq = DVector::zeros(d);
    let mut psi = DMatrix::zeros(d, d);
    for p in partials {
        value += p.value;
        value_sq += p.value_sq;
        for l in 0..d {
            grad[l] += p.grad[l];
            grad_sq[l] += p.grad_sq[l];
        }
        psi += p.psi;
    }
    let nf = n as f64;
    let pairs = nf / 2.0;
    value /= nf;
    grad /= nf;
    psi /= nf;
    let se = |sq: f64, mean: f64| (((sq / pairs) - mean * mean).max(0.0) / (pairs - 1.0).max(1.0)).sqrt();
    let stderr = se(value_sq, value);
    let grad_m_stderr = DVector::from_iterator(d, (0..d).map(|l| se(grad_sq[l], grad[l])));
    // DΦ[Ṡ] = ⟨Ψ, Ṙ⟩ with ṘR + RṘ = Ṡ, so D_SΦ solves G R + R G = sym(Ψ)
    let grad_s = symmetrize(&SylvesterSolver::new(&r).solve(&symmetrize(&psi))?);
    Ok(PhiEval {
        value,
        grad_m: grad,
        grad_s,
        stderr,
        grad_m_stderr,
        exact: false,
    })
}

/// `Φ(m,S)`, `D_mΦ` and `D_SΦ` for a model. Exact for the polynomial
/// tags; otherwise Monte Carlo with one shared set of antithetic draws.
pub fn eval_phi_gradients(model: &LocationScatterModel, phi: &RiskMapping, n_samples: usize, seed: u64) -> Result<PhiEval> {
    phi.check_dim(model.dim())?;
    let draws = if needs_sampling(phi) {
        Some(Draws::new(model.central(), model.dim(), n_samples, seed)?)
    } else {
        None
    };
    eval_at(model.location(), model.scatter(), phi, draws.as_ref())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsOptions {
    /// Joint relative change at which the fixed point stops.
    pub tol: f64,
    pub max_iter: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for LsOptions {
    fn default() -> Self {
        LsOptions {
            tol: 1e-12,
            max_iter: 10_000,
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// How many consecutive growing steps the fixed point tolerates.
pub const DIVERGENCE_STREAK: usize = 3;

const PERTURBATIVE_HINT: &str = "gamma too large for the fixed point to contract; reduce gamma or use --method perturbative";

pub(crate) struct Setup {
    pub m_b: DVector<f64>,
    pub s_b: SpdMatrix,
    pub scatter_variance: f64,
    pub draws: Option<Draws>,
    pub central: CentralLaw,
}

pub(crate) fn setup(ps: &PriorSet<LocationScatterModel>, phi: &RiskMapping, opts: &LsOptions) -> Result<Setup> {
    phi.check_dim(ps.dim())?;
    let bary = ls_wasserstein_barycenter(ps, crate::barycenter::DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let (_, scatter_variance) = ls_frechet_parts(ps, bary.model.location(), bary.model.scatter())?;
    let central = bary.model.central();
    let draws = if needs_sampling(phi) {
        Some(Draws::new(central, ps.dim(), opts.n_samples, opts.seed)?)
    } else {
        None
    };
    Ok(Setup {
        m_b: bary.model.location().clone(),
        s_b: bary.model.scatter().clone(),
        scatter_variance,
        draws,
        central,
    })
}

/// Penalty `(1/2γ)(‖m − m_B‖² + F⁰(S))` relative to the barycenter.
pub(crate) fn penalty(ps: &PriorSet<LocationScatterModel>, st: &Setup, m: &DVector<f64>, s: &SpdMatrix, gamma: f64) -> Result<f64> {
    let (_, scatter) = ls_frechet_parts(ps, m, s)?;
    let f0 = (scatter - st.scatter_variance).max(0.0);
    Ok(((m - &st.m_b).norm_squared() + f0) / (2.0 * gamma))
}

/// Result of the fixed-point solve, before it is packaged as a report.
pub(crate) struct FixedPoint {
    pub m: DVector<f64>,
    pub s: SpdMatrix,
    pub eval: PhiEval,
    pub value: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub residual: f64,
}

pub(crate) fn fixed_point(
    ps: &PriorSet<LocationScatterModel>,
    phi: &RiskMapping,
    gamma: f64,
    st: &Setup,
    opts: &LsOptions,
) -> Result<FixedPoint> {
    let mut m = st.m_b.clone();
    let mut s = st.s_b.clone();
    let mut prev = f64::INFINITY;
    let mut streak = 0;
    for it in 1..=opts.max_iter {
        let ev = eval_at(&m, &s, phi, st.draws.as_ref())?;
        let m_next = &st.m_b + &ev.grad_m * gamma;
        let r = sqrt_spd(&s);
        let t = barycentric_map(ps, r.as_matrix())?;
        let inner = symmetrize(&(t + r.as_matrix() * &ev.grad_s * r.as_matrix() * (2.0 * gamma)));
        let ri = s.inv_sqrt();
        let s_next = spd_iterate(ri.as_matrix() * &inner * &inner * ri.as_matrix())?;
        let step = ((&m_next - &m).norm_squared() + (s_next.as_matrix() - s.as_matrix()).norm_squared()).sqrt();
        let scale = 1.0 + (m.norm_squared() + s.as_matrix().norm_squared()).sqrt();
        let dist = step / scale;
        m = m_next;
        s = s_next;
        if dist <= opts.tol {
            // S = |inner| at a fixed point; it solves the optimality condition only if inner is SPD
            if spd_iterate(inner).is_err() {
                return Err(Error::Numerical(format!(
                    "maximizing scatter leaves the SPD cone; {PERTURBATIVE_HINT}"
                )));
            }
            let eval = eval_at(&m, &s, phi, st.draws.as_ref())?;
            let pen = penalty(ps, st, &m, &s, gamma)?;
            return Ok(FixedPoint {
                value: eval.value - pen,
                m,
                s,
                eval,
                penalty: pen,
                iterations: it,
                residual: dist,
            });
        }
        if !dist.is_finite() {
            return Err(Error::Divergence {
                iterations: it,
                hint: PERTURBATIVE_HINT.into(),
            });
        }
        streak = if dist > prev { streak + 1 } else { 0 };
        if streak >= DIVERGENCE_STREAK {
            return Err(Error::Divergence {
                iterations: it,
                hint: PERTURBATIVE_HINT.into(),
            });
        }
        prev = dist;
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: prev,
        hint: PERTURBATIVE_HINT.into(),
    })
}

/// Solves the first-order conditions `m = m_B + γ D_mΦ`,
/// `S = Σ wᵢ (S^{1/2} Sᵢ S^{1/2})^{1/2} + 2γ S^{1/2} D_SΦ S^{1/2}` by a
/// symmetric fixed point started at the barycenter.
pub fn risk_ls_fixed_point(
    ps: &PriorSet<LocationScatterModel>,
    phi: &RiskMapping,
    gamma: f64,
    opts: &LsOptions,
) -> Result<RiskReport> {
    crate::risk1d::check_gamma(gamma)?;
    let st = setup(ps, phi, opts)?;
    let fp = fixed_point(ps, phi, gamma, &st, opts)?;
    let base = eval_at(&st.m_b, &st.s_b, phi, st.draws.as_ref())?.value;
    let model = LocationScatterModel::new(fp.m, fp.s, st.central)?;
    Ok(RiskReport {
        value: fp.value,
        gamma,
        method: Method::FixedPoint,
        maximizer: Maximizer::LocationScatter(model),
        diagnostics: Diagnostics {
            iterations: fp.iterations,
            residual: fp.residual,
            barycenter_expectation: Some(base),
            penalty: Some(fp.penalty),
            stderr: (!fp.eval.exact).then_some(fp.eval.stderr),
            ..Default::default()
        },
    })
}

/// Closed form for linear mappings: `⟨a, m_B⟩ + γ‖a‖²/2` at `(m_B + γa, S_B)`.
pub fn risk_ls_linear(ps: &PriorSet<LocationScatterModel>, phi: &RiskMapping, gamma: f64) -> Result<RiskReport> {
    crate::risk1d::check_gamma(gamma)?;
    phi.check_dim(ps.dim())?;
    let (alpha, a) = match phi {
        RiskMapping::LinearMulti { a } => (0.0, a.clone()),
        RiskMapping::Affine { alpha, b } => (*alpha, DVector::from_element(1, *b)),
        other => {
            return Err(Error::Invalid(format!(
                "no closed form for a {} mapping; use fixed-point or perturbative",
                other.tag()
            )))
        }
    };
    let bary = ls_wasserstein_barycenter(ps, crate::barycenter::DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let base = alpha + a.dot(bary.model.location());
    let pen = 0.5 * gamma * a.norm_squared();
    let m = bary.model.location() + &a * gamma;
    let model = LocationScatterModel::new(m, bary.model.scatter().clone(), bary.model.central())?;
    Ok(RiskReport {
        value: base + pen,
        gamma,
        method: Method::ClosedForm,
        maximizer: Maximizer::LocationScatter(model),
        diagnostics: Diagnostics {
            barycenter_expectation: Some(base),
            penalty: Some(pen),
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------------------
// first-order expansion in γ

/// Index pairs `(k, l)`, `k ≤ l`, of the upper triangle.
fn triangle(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for k in 0..d {
        for l in k..d {
            out.push((k, l));
        }
    }
    out
}

fn vech_into(m: &DMatrix<f64>, tri: &[(usize, usize)], out: &mut [f64]) {
    for (o, &(k, l)) in out.iter_mut().zip(tri) {
        *o = m[(k, l)];
    }
}

fn unvech(v: &[f64], d: usize, tri: &[(usize, usize)]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for (&x, &(k, l)) in v.iter().zip(tri) {
        m[(k, l)] = x;
        m[(l, k)] = x;
    }
    m
}

/// Tangent of the barycenter map at `S_B`.
///
/// For a scatter perturbation `S_B + εS̃` with `S^{1/2} = B + εJ` and
/// `(S^{1/2} Sᵢ S^{1/2})^{1/2} = Eᵢ + εHᵢ`, the optimality condition at first
/// order is the linear system
///
/// ```text
/// S̃ − Σ wᵢ Hᵢ = 2 B W B
/// S̃ − J B − B J = 0
/// J Dᵢ + Dᵢᵀ J − Hᵢ Eᵢ − Eᵢ Hᵢ = 0        Dᵢ = Sᵢ B
/// ```
///
/// over symmetric unknowns, assembled densely and factored once.
pub(crate) struct Tangent {
    d: usize,
    weights: Vec<f64>,
    b: DMatrix<f64>,
    ds: Vec<DMatrix<f64>>,
    es: Vec<DMatrix<f64>>,
    /// `Bᵢ = Sᵢ^{1/2}`
    b_roots: Vec<DMatrix<f64>>,
    /// `Gᵢ = (Bᵢ S_B Bᵢ)^{1/2}`, factored for Sylvester solves.
    g_solvers: Vec<SylvesterSolver>,
    g_mats: Vec<DMatrix<f64>>,
    tri: Vec<(usize, usize)>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Solution of the tangent system for one right-hand side.
#[derive(Debug, Clone)]
pub struct TangentSolution {
    pub s_tilde: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    /// Frobenius residuals of the three equation groups (max over priors for the last).
    pub residuals: [f64; 3],
}

impl Tangent {
    pub(crate) fn new(ps: &PriorSet<LocationScatterModel>, s_b: &SpdMatrix) -> Result<Self> {
        let d = s_b.dim();
        let b = sqrt_spd(s_b).into_matrix();
        let mut ds = Vec::new();
        let mut es = Vec::new();
        let mut b_roots = Vec::new();
        let mut g_solvers = Vec::new();
        let mut g_mats = Vec::new();
        for p in ps.models() {
            let si = p.scatter().as_matrix();
            ds.push(si * &b);
            es.push(sqrt_psd_product(&(&b * si * &b))?.into_matrix());
            let bi = sqrt_spd(p.scatter()).into_matrix();
            let gi = sqrt_psd_product(&(&bi * s_b.as_matrix() * &bi))?;
            g_solvers.push(SylvesterSolver::new(&gi));
            g_mats.push(gi.into_matrix());
            b_roots.push(bi);
        }
        let tri = triangle(d);
        let n = ps.len();
        let p = tri.len();
        let size = (n + 2) * p;
        let mut a = DMatrix::zeros(size, size);
        let mut t = Tangent {
            d,
            weights: ps.weights().to_vec(),
            b,
            ds,
            es,
            b_roots,
            g_solvers,
            g_mats,
            tri,
            lu: DMatrix::<f64>::identity(1, 1).lu(),
        };
        let mut unknowns = vec![DMatrix::zeros(d, d); n + 2];
        let mut col = vec![0.0; size];
        for blk in 0..n + 2 {
            for (idx, &(k, l)) in t.tri.clone().iter().enumerate() {
                unknowns[blk][(k, l)] = 1.0;
                unknowns[blk][(l, k)] = 1.0;
                let res = t.apply(&unknowns[0], &unknowns[1], &unknowns[2..]);
                for (e, r) in res.iter().enumerate() {
                    vech_into(r, &t.tri, &mut col[e * p..(e + 1) * p]);
                }
                a.column_mut(blk * p + idx).copy_from_slice(&col);
                unknowns[blk][(k, l)] = 0.0;
                unknowns[blk][(l, k)] = 0.0;
            }
        }
        t.lu = a.lu();
        Ok(t)
    }

    /// Left-hand sides of the three equation groups.
    fn apply(&self, st: &DMatrix<f64>, j: &DMatrix<f64>, h: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let mut first = st.clone();
        for (w, hi) in self.weights.iter().zip(h) {
            first -= hi * *w;
        }
        let second = st - j * &self.b - &self.b * j;
        let mut out = vec![first, second];
        for ((di, ei), hi) in self.ds.iter().zip(&self.es).zip(h) {
            out.push(j * di + di.transpose() * j - hi * ei - ei * hi);
        }
        out
    }

    /// Solves the system with right-hand side `2 B W B` in the first group.
    pub(crate) fn solve(&self, w: &DMatrix<f64>) -> Result<TangentSolution> {
        let d = self.d;
        let p = self.tri.len();
        let n = self.weights.len();
        let rhs_mat = symmetrize(&(&self.b * w * &self.b * 2.0));
        let mut rhs = DVector::zeros((n + 2) * p);
        vech_into(&rhs_mat, &self.tri, &mut rhs.as_mut_slice()[..p]);
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("tangent system of the barycenter map (degenerate priors?)".into()))?;
        let blocks: Vec<DMatrix<f64>> = (0..n + 2).map(|b| unvech(&x.as_slice()[b * p..(b + 1) * p], d, &self.tri)).collect();
        let res = self.apply(&blocks[0], &blocks[1], &blocks[2..]);
        let r0 = (&res[0] - &rhs_mat).norm();
        let r1 = res[1].norm();
        let r2 = res[2..].iter().map(|r| r.norm()).fold(0.0, f64::max);
        if !(r0.is_finite() && r1.is_finite() && r2.is_finite()) {
            return Err(Error::Singular("tangent system produced non-finite values".into()));
        }
        let mut it = blocks.into_iter();
        let s_tilde = it.next().unwrap();
        let j = it.next().unwrap();
        Ok(TangentSolution {
            s_tilde,
            j,
            h: it.collect(),
            residuals: [r0, r1, r2],
        })
    }

    /// `Yᵢ Gᵢ + Gᵢ Yᵢ = Bᵢ S̃ Bᵢ` per prior, with the largest residual.
    pub(crate) fn first_sylvester(&self, s_tilde: &DMatrix<f64>) -> Result<(Vec<DMatrix<f64>>, f64)> {
        let mut out = Vec::with_capacity(self.g_solvers.len());
        let mut worst: f64 = 0.0;
        for ((solver, bi), gi) in self.g_solvers.iter().zip(&self.b_roots).zip(&self.g_mats) {
            let c = bi * s_tilde * bi;
            let y = solver.solve(&c)?;
            worst = worst.max(crate::spd::sylvester_residual(gi, &y, &c));
            out.push(y);
        }
        Ok((out, worst))
    }

    /// `Zᵢ Gᵢ + Gᵢ Zᵢ = −(Yᵢ Y′ᵢ + Y′ᵢ Yᵢ)` per prior; with `Y′ = Y` this is
    /// the second-order term `−2Yᵢ²`.
    pub(crate) fn second_sylvester(&self, y: &[DMatrix<f64>], y_prime: &[DMatrix<f64>]) -> Result<(Vec<DMatrix<f64>>, f64)> {
        let mut out = Vec::with_capacity(y.len());
        let mut worst: f64 = 0.0;
        for (((solver, gi), yi), ypi) in self.g_solvers.iter().zip(&self.g_mats).zip(y).zip(y_prime) {
            let c = -(yi * ypi + ypi * yi);
            let z = solver.solve(&c)?;
            worst = worst.max(crate::spd::sylvester_residual(gi, &z, &c));
            out.push(z);
        }
        Ok((out, worst))
    }

    pub(crate) fn weighted_trace(&self, z: &[DMatrix<f64>]) -> f64 {
        self.weights.iter().zip(z).map(|(w, zi)| w * zi.trace()).sum()
    }
}

/// Every matrix of the first-order expansion, with residuals.
#[derive(Debug, Clone)]
pub struct PerturbationSolution {
    pub m_tilde: DVector<f64>,
    pub s_tilde: DMatrix<f64>,
    pub j: DMatrix<f64>,
    pub h: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
    pub z: Vec<DMatrix<f64>>,
    pub residuals: BTreeMap<String, f64>,
}

impl PerturbationSolution {
    pub fn max_residual(&self) -> f64 {
        self.residuals
            .iter()
            .filter(|(k, _)| k.as_str() != "trace_identity")
            .map(|(_, v)| *v)
            .fold(0.0, f64::max)
    }
}

pub(crate) fn perturbation_solution(tangent: &Tangent, grad: &PhiEval) -> Result<PerturbationSolution> {
    let sol = tangent.solve(&grad.grad_s)?;
    let (y, r3) = tangent.first_sylvester(&sol.s_tilde)?;
    let (z, r2) = tangent.second_sylvester(&y, &y)?;
    // the first-order S̃ maximizes a concave quadratic, so its linear part is twice the quadratic part
    let lin = (&grad.grad_s * &sol.s_tilde).trace();
    let quad = 0.5 * tangent.weighted_trace(&z);
    let mut residuals = BTreeMap::new();
    residuals.insert("tangent_sum".to_string(), sol.residuals[0]);
    residuals.insert("tangent_root".to_string(), sol.residuals[1]);
    residuals.insert("tangent_transport".to_string(), sol.residuals[2]);
    residuals.insert("first_sylvester".to_string(), r3);
    residuals.insert("second_sylvester".to_string(), r2);
    residuals.insert("trace_identity".to_string(), (lin + quad - 0.5 * lin).abs());
    Ok(PerturbationSolution {
        m_tilde: grad.grad_m.clone(),
        s_tilde: sol.s_tilde,
        j: sol.j,
        h: sol.h,
        y,
        z,
        residuals,
    })
}

/// Solves the expansion matrices at the barycenter of `ps` for `phi`.
pub fn solve_perturbation(ps: &PriorSet<LocationScatterModel>, phi: &RiskMapping, opts: &LsOptions) -> Result<PerturbationSolution> {
    let st = setup(ps, phi, opts)?;
    let grad = eval_at(&st.m_b, &st.s_b, phi, st.draws.as_ref())?;
    let tangent = Tangent::new(ps, &st.s_b)?;
    perturbation_solution(&tangent, &grad)
}

/// First-order value `Φ_B + γ(½‖M_B‖² + Tr(C_B S̃) + ½ Σ wᵢ Tr Zᵢ)`,
/// reported with the maximizer `(m_B + γM_B, S_B + γS̃)`. Accepts `γ = 0`.
pub fn risk_ls_perturbative(
    ps: &PriorSet<LocationScatterModel>,
    phi: &RiskMapping,
    gamma: f64,
    opts: &LsOptions,
) -> Result<RiskReport> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma must be non-negative and finite, got {gamma}")));
    }
    let st = setup(ps, phi, opts)?;
    let grad = eval_at(&st.m_b, &st.s_b, phi, st.draws.as_ref())?;
    let tangent = Tangent::new(ps, &st.s_b)?;
    let sol = perturbation_solution(&tangent, &grad)?;
    let first = 0.5 * grad.grad_m.norm_squared() + (&grad.grad_s * &sol.s_tilde).trace() + 0.5 * tangent.weighted_trace(&sol.z);
    let value = grad.value + gamma * first;
    let mut notes = Vec::new();
    let m = &st.m_b + &sol.m_tilde * gamma;
    let s = match SpdMatrix::new(symmetrize(&(st.s_b.as_matrix() + &sol.s_tilde * gamma))) {
        Ok(s) => s,
        Err(_) => {
            notes.push("first-order scatter is not SPD; reporting the barycenter scatter".into());
            st.s_b.clone()
        }
    };
    let max_residual = sol.max_residual();
    let model = LocationScatterModel::new(m, s, st.central)?;
    Ok(RiskReport {
        value,
        gamma,
        method: Method::Perturbative,
        maximizer: Maximizer::LocationScatter(model),
        diagnostics: Diagnostics {
            residual: max_residual,
            barycenter_expectation: Some(grad.value),
            penalty: Some(gamma * first),
            stderr: (!grad.exact).then_some(grad.stderr),
            residuals: sol.residuals,
            notes,
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LsMethod {
    #[default]
    Auto,
    Closed,
    FixedPoint,
    Perturbative,
}

impl std::str::FromStr for LsMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(LsMethod::Auto),
            "closed" | "closed-form" => Ok(LsMethod::Closed),
            "fixed-point" | "foc" => Ok(LsMethod::FixedPoint),
            "perturbative" => Ok(LsMethod::Perturbative),
            other => Err(Error::Invalid(format!("unknown method {other:?}"))),
        }
    }
}

/// Dispatches on `method`; `Auto` uses the closed form for linear mappings
/// and the fixed point otherwise.
pub fn risk_ls(
    ps: &PriorSet<LocationScatterModel>,
    phi: &RiskMapping,
    gamma: f64,
    method: LsMethod,
    opts: &LsOptions,
) -> Result<RiskReport> {
    match method {
        LsMethod::Closed => risk_ls_linear(ps, phi, gamma),
        LsMethod::FixedPoint => risk_ls_fixed_point(ps, phi, gamma, opts),
        LsMethod::Perturbative => risk_ls_perturbative(ps, phi, gamma, opts),
        LsMethod::Auto => match phi {
            RiskMapping::LinearMulti { .. } | RiskMapping::Affine { .. } => risk_ls_linear(ps, phi, gamma),
            _ => risk_ls_fixed_point(ps, phi, gamma, opts),
        },
    }
}
