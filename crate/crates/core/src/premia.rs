//! Premia for the compound mixed Poisson model with separate priors on the
//! frequency factor `Z¹` and the severity factor `Z²`.
//!
//! The expected total claim is `Φ₁(m¹, S¹) Φ₂(m², S²)` and the risk is its
//! maximum minus `(F₁ + F₂)/(2γ)`.

use nalgebra::{dvector, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barycenter::{kl_barycenter, ls_wasserstein_barycenter, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::entropic::entropic_risk_from_barycenter;
use crate::error::{Error, Result};
use crate::models::{Axis, DensityGrid, GridDensityModel, LocationScatterModel, PriorSet, RiskMapping};
use crate::report::{Diagnostics, Maximizer, Method, RiskReport};
use crate::risk_ls::{eval_at, fixed_point, penalty, setup, LsOptions};
use crate::spd::SpdMatrix;

#[derive(Debug, Clone)]
pub struct PremiumProblem {
    pub priors1: PriorSet<LocationScatterModel>,
    pub priors2: PriorSet<LocationScatterModel>,
    pub phi1: RiskMapping,
    pub phi2: RiskMapping,
    pub gamma: f64,
    /// Safety loading α in `π = (1 + α) ρ`.
    pub loading: f64,
}

impl PremiumProblem {
    /// Linear factor mappings `⟨a¹, Z¹⟩` and `⟨a², Z²⟩`.
    pub fn linear(
        priors1: PriorSet<LocationScatterModel>,
        priors2: PriorSet<LocationScatterModel>,
        a1: DVector<f64>,
        a2: DVector<f64>,
        gamma: f64,
        loading: f64,
    ) -> Result<Self> {
        let p = Self {
            priors1,
            priors2,
            phi1: RiskMapping::linear_multi(a1),
            phi2: RiskMapping::linear_multi(a2),
            gamma,
            loading,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("gamma must be non-negative and finite, got {}", self.gamma)));
        }
        if !(self.loading >= 0.0 && self.loading.is_finite()) {
            return Err(Error::Invalid(format!("loading must be non-negative, got {}", self.loading)));
        }
        self.phi1.check_dim(self.priors1.dim())?;
        self.phi2.check_dim(self.priors2.dim())
    }
}

/// Solution of the scalar linear problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearPremium {
    pub m1: f64,
    pub m2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub risk: f64,
    pub premium: f64,
}

fn scalar_slope(phi: &RiskMapping) -> Result<f64> {
    match phi {
        RiskMapping::LinearMulti { a } if a.len() == 1 => Ok(a[0]),
        RiskMapping::Affine { alpha, b } if *alpha == 0.0 => Ok(*b),
        _ => Err(Error::Invalid(format!(
            "scalar linear premium needs mappings a*z with one factor, got {}",
            phi.tag()
        ))),
    }
}

fn scalar_barycenter(ps: &PriorSet<LocationScatterModel>) -> Result<(f64, f64)> {
    if ps.dim() != 1 {
        return Err(Error::Dimension(format!("expected one-dimensional factors, got dimension {}", ps.dim())));
    }
    let mean = ps.iter().map(|(w, m)| w * m.location()[0]).sum();
    let root: f64 = ps.iter().map(|(w, m)| w * m.scatter().as_matrix()[(0, 0)].sqrt()).sum();
    Ok((mean, root * root))
}

/// Solves `m₁ = m₁B + γa₁a₂m₂`, `m₂ = m₂B + γa₁a₂m₁` with the scatters
/// at their barycenters `(Σ wᵢ √σⱼᵢ)²`.
pub fn premium_linear_1d(p: &PremiumProblem) -> Result<LinearPremium> {
    p.check()?;
    let (a1, a2) = (scalar_slope(&p.phi1)?, scalar_slope(&p.phi2)?);
    let (m1b, sigma1) = scalar_barycenter(&p.priors1)?;
    let (m2b, sigma2) = scalar_barycenter(&p.priors2)?;
    let k = p.gamma * a1 * a2;
    let det = 1.0 - k * k;
    if det <= 0.0 {
        return Err(Error::Singular(format!(
            "1 - (gamma*a1*a2)^2 = {det:.3e} <= 0: the mean system has no maximizing solution"
        )));
    }
    let m1 = (m1b + k * m2b) / det;
    let m2 = (m2b + k * m1b) / det;
    let penalty = if p.gamma > 0.0 {
        ((m1 - m1b).powi(2) + (m2 - m2b).powi(2)) / (2.0 * p.gamma)
    } else {
        0.0
    };
    let risk = a1 * m1 * a2 * m2 - penalty;
    Ok(LinearPremium {
        m1,
        m2,
        sigma1,
        sigma2,
        risk,
        premium: (1.0 + p.loading) * risk,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PremiumReport {
    pub premium: f64,
    pub loading: f64,
    pub risk: RiskReport,
}

fn relative_change(a: &DVector<f64>, b: &DVector<f64>, s: &SpdMatrix, t: &SpdMatrix) -> f64 {
    let step = ((a - b).norm_squared() + (s.as_matrix() - t.as_matrix()).norm_squared()).sqrt();
    step / (1.0 + (b.norm_squared() + t.as_matrix().norm_squared()).sqrt())
}

/// Alternates between the two blocks: block 1 solves the location-scatter
/// problem for `Φ₂ · Φ₀¹` with `Φ₂` frozen, then block 2 for `Φ₁ · Φ₀²`.
pub fn premium_general(p: &PremiumProblem, tol: f64, max_iter: usize, opts: &LsOptions) -> Result<PremiumReport> {
    p.check()?;
    let st1 = setup(&p.priors1, &p.phi1, opts)?;
    let mut opts2 = *opts;
    opts2.seed = opts.seed.wrapping_add(1);
    let st2 = setup(&p.priors2, &p.phi2, &opts2)?;
    let (mut m1, mut s1) = (st1.m_b.clone(), st1.s_b.clone());
    let (mut m2, mut s2) = (st2.m_b.clone(), st2.s_b.clone());
    let mut iterations = 0;
    let mut residual = 0.0;
    if p.gamma > 0.0 {
        let scaled = |phi: &RiskMapping, c: f64| RiskMapping::portfolio(&[(c, phi.clone())]);
        residual = f64::INFINITY;
        while residual > tol {
            if iterations == max_iter {
                return Err(Error::NoConvergence {
                    iterations,
                    residual,
                    hint: "alternating premium blocks; lower gamma".into(),
                });
            }
            iterations += 1;
            let c2 = eval_at(&m2, &s2, &p.phi2, st2.draws.as_ref())?.value;
            let b1 = fixed_point(&p.priors1, &scaled(&p.phi1, c2)?, p.gamma, &st1, opts)?;
            let c1 = eval_at(&b1.m, &b1.s, &p.phi1, st1.draws.as_ref())?.value;
            let b2 = fixed_point(&p.priors2, &scaled(&p.phi2, c1)?, p.gamma, &st2, &opts2)?;
            residual = relative_change(&b1.m, &m1, &b1.s, &s1).max(relative_change(&b2.m, &m2, &b2.s, &s2));
            if !residual.is_finite() {
                return Err(Error::Divergence {
                    iterations,
                    hint: "alternating premium blocks; lower gamma".into(),
                });
            }
            (m1, s1, m2, s2) = (b1.m, b1.s, b2.m, b2.s);
        }
    }
    let phi1 = eval_at(&m1, &s1, &p.phi1, st1.draws.as_ref())?;
    let phi2 = eval_at(&m2, &s2, &p.phi2, st2.draws.as_ref())?;
    let pen = if p.gamma > 0.0 {
        penalty(&p.priors1, &st1, &m1, &s1, p.gamma)? + penalty(&p.priors2, &st2, &m2, &s2, p.gamma)?
    } else {
        0.0
    };
    let base = eval_at(&st1.m_b, &st1.s_b, &p.phi1, st1.draws.as_ref())?.value
        * eval_at(&st2.m_b, &st2.s_b, &p.phi2, st2.draws.as_ref())?.value;
    let value = phi1.value * phi2.value - pen;
    let blocks = vec![
        LocationScatterModel::new(m1, s1, st1.central)?,
        LocationScatterModel::new(m2, s2, st2.central)?,
    ];
    let risk = RiskReport {
        value,
        gamma: p.gamma,
        method: Method::FixedPoint,
        maximizer: Maximizer::Blocks { blocks },
        diagnostics: Diagnostics {
            iterations,
            residual,
            barycenter_expectation: Some(base),
            penalty: Some(pen),
            ..Default::default()
        },
    };
    Ok(PremiumReport {
        premium: (1.0 + p.loading) * value,
        loading: p.loading,
        risk,
    })
}

/// Normal factor laws `Z¹ ~ N(m1, s1)`, `Z² ~ N(m2, s2)`; `s` is a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub m1: f64,
    pub s1: f64,
    pub m2: f64,
    pub s2: f64,
}

impl Default for TrueParams {
    fn default() -> Self {
        Self {
            m1: 100.0,
            s1: 25.0,
            m2: 50.0,
            s2: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Homogeneity {
    pub label: String,
    /// Relative standard deviation of each parameter perturbation.
    pub scale: f64,
}

/// Perturbations `θ(1 + hε)` use a standard normal `ε` truncated at this bound.
pub const PERTURBATION_BOUND: f64 = 3.0;
/// Allowed probability of a non-positive frequency or severity under the true law.
const POSITIVITY_TAIL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub true_params: TrueParams,
    pub homogeneity: Vec<Homogeneity>,
    pub n_experts: Vec<usize>,
    pub gamma_grid: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Points per axis of the entropic density grid.
    pub entropic_points: usize,
    /// Half-width of the entropic grid in prior standard deviations.
    pub entropic_padding: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            true_params: TrueParams::default(),
            homogeneity: vec![
                Homogeneity { label: "hh".into(), scale: 0.02 },
                Homogeneity { label: "mh".into(), scale: 0.10 },
                Homogeneity { label: "lh".into(), scale: 0.25 },
            ],
            n_experts: vec![5, 10, 30],
            gamma_grid: vec![0.1, 0.05, 0.01, 0.005, 0.001, 0.0],
            replications: 100,
            seed: 0,
            entropic_points: 201,
            entropic_padding: 12.0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.true_params;
        let z = statrs::distribution::ContinuousCDF::inverse_cdf(
            &statrs::distribution::Normal::standard(),
            1.0 - POSITIVITY_TAIL,
        );
        for (name, m, s) in [("frequency", t.m1, t.s1), ("severity", t.m2, t.s2)] {
            if !(s > 0.0 && s.is_finite() && m.is_finite()) {
                return Err(Error::Invalid(format!("{name} parameters must be finite with positive variance")));
            }
            if m < z * s.sqrt() {
                return Err(Error::Invalid(format!(
                    "{name} law N({m}, {s}) is negative with probability above {POSITIVITY_TAIL}"
                )));
            }
        }
        if self.homogeneity.is_empty() {
            return Err(Error::Invalid("no homogeneity scenarios".into()));
        }
        for pair in self.homogeneity.windows(2) {
            if pair[0].scale >= pair[1].scale {
                return Err(Error::Invalid(format!(
                    "perturbation scales must increase strictly: {} ({}) then {} ({})",
                    pair[0].label, pair[0].scale, pair[1].label, pair[1].scale
                )));
            }
        }
        for h in &self.homogeneity {
            if !(h.scale > 0.0 && h.scale * PERTURBATION_BOUND < 1.0) {
                return Err(Error::Invalid(format!(
                    "scale {} of {} must lie in (0, 1/{PERTURBATION_BOUND}) to keep parameters positive",
                    h.scale, h.label
                )));
            }
        }
        if self.n_experts.is_empty() || self.n_experts.contains(&0) {
            return Err(Error::Invalid("expert counts must be positive".into()));
        }
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::Invalid("gamma grid must be non-empty and non-negative".into()));
        }
        if self.replications < 2 {
            return Err(Error::Invalid("at least two replications are needed".into()));
        }
        if self.entropic_points < 3 || !(self.entropic_padding > 0.0) {
            return Err(Error::Invalid("entropic grid needs at least 3 points and positive padding".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyMethod {
    Average,
    Entropic,
    Wasserstein,
}

impl StudyMethod {
    pub const ALL: [StudyMethod; 3] = [StudyMethod::Average, StudyMethod::Entropic, StudyMethod::Wasserstein];

    pub fn as_str(&self) -> &'static str {
        match self {
            StudyMethod::Average => "average",
            StudyMethod::Entropic => "entropic",
            StudyMethod::Wasserstein => "wasserstein",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub homogeneity: String,
    pub n: usize,
    pub gamma: f64,
    pub method: StudyMethod,
    #[serde(serialize_with = "nan_as_empty")]
    pub mean_risk: f64,
    #[serde(serialize_with = "nan_as_empty")]
    pub mean_rel_err: f64,
    #[serde(serialize_with = "nan_as_empty")]
    pub sd_rel_err: f64,
    pub failures: usize,
}

fn nan_as_empty<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_nan() {
        s.serialize_none()
    } else {
        s.serialize_f64(*x)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyTable {
    pub true_risk: f64,
    pub seed: u64,
    pub replications: usize,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub const CSV_HEADER: &'static str = "homogeneity,n,gamma,method,mean_risk,mean_rel_err,sd_rel_err,failures";

    /// Statistics of cells where every replication failed are left empty.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is utf-8")
    }

    pub fn row(&self, homogeneity: &str, n: usize, gamma: f64, method: StudyMethod) -> Option<&StudyRow> {
        self.rows
            .iter()
            .find(|r| r.homogeneity == homogeneity && r.n == n && r.gamma == gamma && r.method == method)
    }
}

/// One expert's parameters `(m1, s1, m2, s2)`.
type Expert = [f64; 4];

fn draw_experts(t: &TrueParams, scale: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Expert> {
    let mut eps = || loop {
        let e: f64 = StandardNormal.sample(rng);
        if e.abs() <= PERTURBATION_BOUND {
            return e;
        }
    };
    (0..n)
        .map(|_| {
            let mut x = [t.m1, t.s1, t.m2, t.s2];
            for v in &mut x {
                *v *= 1.0 + scale * eps();
            }
            x
        })
        .collect()
}

fn ls_priors(experts: &[Expert], loc: usize) -> Result<PriorSet<LocationScatterModel>> {
    let models = experts
        .iter()
        .map(|e| LocationScatterModel::gaussian(dvector![e[loc]], SpdMatrix::new(DMatrix::from_element(1, 1, e[loc + 1]))?))
        .collect::<Result<Vec<_>>>()?;
    PriorSet::uniform(models)
}

fn entropic_priors(experts: &[Expert], cfg: &SimulationConfig) -> Result<PriorSet<GridDensityModel>> {
    let axis = |loc: usize| {
        let pad = cfg.entropic_padding;
        let lo = experts.iter().map(|e| e[loc] - pad * e[loc + 1].sqrt()).fold(f64::INFINITY, f64::min);
        let hi = experts.iter().map(|e| e[loc] + pad * e[loc + 1].sqrt()).fold(f64::NEG_INFINITY, f64::max);
        Axis::new(lo, hi, cfg.entropic_points)
    };
    let grid = DensityGrid::new(vec![axis(0)?, axis(2)?])?;
    let models = experts
        .iter()
        .map(|e| GridDensityModel::gaussian_product(grid.clone(), &[e[0], e[2]], &[e[1], e[3]]))
        .collect::<Result<Vec<_>>>()?;
    PriorSet::uniform(models)
}

/// Risk per method and γ for one replication; `None` marks a failure.
fn replication(experts: &[Expert], cfg: &SimulationConfig) -> Vec<[Option<f64>; 3]> {
    let average: f64 = experts.iter().map(|e| e[0] * e[2]).sum::<f64>() / experts.len() as f64;
    let ls = ls_priors(experts, 0).and_then(|p1| Ok((p1, ls_priors(experts, 2)?)));
    let phi = RiskMapping::product(2);
    let kl = entropic_priors(experts, cfg).and_then(|ps| kl_barycenter(&ps));
    cfg.gamma_grid
        .iter()
        .map(|&gamma| {
            let wasserstein = ls.as_ref().ok().and_then(|(p1, p2)| {
                let prob = PremiumProblem::linear(p1.clone(), p2.clone(), dvector![1.0], dvector![1.0], gamma, 0.0).ok()?;
                premium_linear_1d(&prob).ok().map(|s| s.risk)
            });
            let entropic = kl.as_ref().ok().and_then(|bary| {
                if gamma > 0.0 {
                    entropic_risk_from_barycenter(bary, &phi, gamma).ok().map(|r| r.value)
                } else {
                    let f = &bary.model;
                    let grid = f.grid();
                    let w = grid.weights();
                    let mut z = [0.0; 2];
                    Some(
                        (0..grid.len())
                            .map(|k| {
                                grid.point_into(k, &mut z);
                                w[k] * f.density()[k] * z[0] * z[1]
                            })
                            .sum(),
                    )
                }
            });
            [Some(average), entropic, wasserstein]
        })
        .collect()
}

fn summarize(values: &[f64], true_risk: f64) -> (f64, f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let errs: Vec<f64> = values.iter().map(|v| (v - true_risk).abs() / true_risk).collect();
    let mean_err = errs.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (errs.iter().map(|e| (e - mean_err).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, mean_err, sd)
}

/// Runs every (homogeneity, n) cell: `replications` expert panels are drawn
/// by perturbing the true parameters and each panel is priced by every
/// method at every γ. Replication `r` of cell `c` uses seed `seed + r` on
/// stream `c`, so the table does not depend on the thread count.
pub fn run_robustness_study(cfg: &SimulationConfig) -> Result<StudyTable> {
    cfg.validate()?;
    let t = cfg.true_params;
    let true_risk = t.m1 * t.m2;
    let mut rows = Vec::new();
    let mut cell = 0u64;
    for h in &cfg.homogeneity {
        for &n in &cfg.n_experts {
            let results: Vec<Vec<[Option<f64>; 3]>> = (0..cfg.replications)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
                    rng.set_stream(cell);
                    let experts = draw_experts(&t, h.scale, n, &mut rng);
                    replication(&experts, cfg)
                })
                .collect();
            for (g, &gamma) in cfg.gamma_grid.iter().enumerate() {
                for (k, method) in StudyMethod::ALL.iter().enumerate() {
                    let values: Vec<f64> = results.iter().filter_map(|rep| rep[g][k]).collect();
                    let (mean_risk, mean_rel_err, sd_rel_err) = summarize(&values, true_risk);
                    rows.push(StudyRow {
                        homogeneity: h.label.clone(),
                        n,
                        gamma,
                        method: *method,
                        mean_risk,
                        mean_rel_err,
                        sd_rel_err,
                        failures: cfg.replications - values.len(),
                    });
                }
            }
            cell += 1;
        }
    }
    Ok(StudyTable {
        true_risk,
        seed: cfg.seed,
        replications: cfg.replications,
        rows,
    })
}

/// Barycenter means, used by the study's γ = 0 sanity checks.
pub fn barycenter_means(p: &PremiumProblem) -> Result<(DVector<f64>, DVector<f64>)> {
    Ok((
        ls_wasserstein_barycenter(&p.priors1, DEFAULT_TOL, DEFAULT_MAX_ITER)?.model.location().clone(),
        ls_wasserstein_barycenter(&p.priors2, DEFAULT_TOL, DEFAULT_MAX_ITER)?.model.location().clone(),
    ))
}
