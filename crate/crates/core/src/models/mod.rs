//! Probability models, prior sets and risk mappings.

mod density;
mod location_scatter;
mod mapping;
mod quantile;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use density::{Axis, DensityGrid, GridDensityModel, DENSITY_MASS_TOL};
pub(crate) use density::normalize_log;
pub use location_scatter::{CentralLaw, LocationScatterModel, MOMENT_CHECK_SAMPLES};
pub use mapping::{CustomMapping, EvalFn, GradFn, RiskMapping, ScalarFn, FD_STEP};
pub use quantile::{QuantileGrid, QuantileModel, DEFAULT_GRID_SIZE};

use crate::error::{Error, Result};
use crate::spd::sqrt_spd;

/// Tolerance on `Σ wᵢ = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Prior weights on the unit simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let v = WeightVector(w);
        match v.violations().into_iter().next() {
            Some(msg) => Err(Error::Invalid(msg.message)),
            None => Ok(v),
        }
    }

    pub fn new_unchecked(w: Vec<f64>) -> Self {
        WeightVector(w)
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, &w) in self.0.iter().enumerate() {
            if !(w >= 0.0 && w.is_finite()) {
                out.push(Violation::at(i, format!("weight {i} is {w}, must be a non-negative number")));
            }
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            // print the sum the way a person would write it, not 1.0999999999999999
            let shown = (sum * 1e12).round() / 1e12;
            out.push(Violation::global(format!("weights sum {shown} ≠ 1, off the unit simplex")));
        }
        out
    }
}

/// One broken invariant, with the index of the offending model or weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub index: Option<usize>,
    pub message: String,
}

impl Violation {
    pub fn at(index: usize, message: impl Into<String>) -> Self {
        Violation {
            index: Some(index),
            message: message.into(),
        }
    }

    pub fn global(message: impl Into<String>) -> Self {
        Violation {
            index: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "model {i}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msgs: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
            Err(Error::Invalid(msgs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Quantile,
    LocationScatter,
    GridDensity,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Quantile => "quantile",
            ModelKind::LocationScatter => "location-scatter",
            ModelKind::GridDensity => "grid-density",
        }
    }
}

/// Common interface of the three model kinds, used by [`PriorSet`].
pub trait Model: Clone {
    const KIND: ModelKind;

    /// Broken invariants of this model alone.
    fn own_violations(&self) -> Vec<String>;

    /// Reason this model cannot share a prior set with `reference`, if any.
    fn incompatibility(&self, reference: &Self) -> Option<String>;
}

impl Model for QuantileModel {
    const KIND: ModelKind = ModelKind::Quantile;

    fn own_violations(&self) -> Vec<String> {
        self.violations()
    }

    fn incompatibility(&self, reference: &Self) -> Option<String> {
        (!self.same_grid(reference)).then(|| "quantile grid differs from model 0".to_string())
    }
}

impl Model for LocationScatterModel {
    const KIND: ModelKind = ModelKind::LocationScatter;

    fn own_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.location().len() != self.scatter().dim() {
            out.push("location and scatter dimensions differ".to_string());
        }
        if let Err(e) = self.central().check_parameters() {
            out.push(e.to_string());
        }
        out
    }

    fn incompatibility(&self, reference: &Self) -> Option<String> {
        if self.dim() != reference.dim() {
            return Some(format!("dimension {} differs from model 0 ({})", self.dim(), reference.dim()));
        }
        (self.central() != reference.central()).then(|| "central law differs from model 0".to_string())
    }
}

impl Model for GridDensityModel {
    const KIND: ModelKind = ModelKind::GridDensity;

    fn own_violations(&self) -> Vec<String> {
        self.violations()
    }

    fn incompatibility(&self, reference: &Self) -> Option<String> {
        (self.grid() != reference.grid()).then(|| "density grid differs from model 0".to_string())
    }
}

/// A weighted collection of models of one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet<M> {
    models: Vec<M>,
    weights: WeightVector,
}

impl<M: Model> PriorSet<M> {
    pub fn new(models: Vec<M>, weights: Vec<f64>) -> Result<Self> {
        let ps = Self::from_parts_unchecked(models, WeightVector::new_unchecked(weights));
        ps.validate().into_result()?;
        Ok(ps)
    }

    pub fn uniform(models: Vec<M>) -> Result<Self> {
        let n = models.len();
        Self::new(models, vec![1.0 / n.max(1) as f64; n])
    }

    /// Skips validation; pair with [`PriorSet::validate`].
    pub fn from_parts_unchecked(models: Vec<M>, weights: WeightVector) -> Self {
        PriorSet { models, weights }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.models.is_empty() {
            violations.push(Violation::global("prior set is empty"));
        }
        if self.weights.len() != self.models.len() {
            violations.push(Violation::global(format!(
                "{} weights for {} models",
                self.weights.len(),
                self.models.len()
            )));
        }
        violations.extend(self.weights.violations());
        for (i, m) in self.models.iter().enumerate() {
            violations.extend(m.own_violations().into_iter().map(|msg| Violation::at(i, msg)));
            if i > 0 {
                if let Some(msg) = m.incompatibility(&self.models[0]) {
                    violations.push(Violation::at(i, msg));
                }
            }
        }
        ValidationReport { violations }
    }

    pub fn kind(&self) -> ModelKind {
        M::KIND
    }

    pub fn models(&self) -> &[M] {
        &self.models
    }

    pub fn weights(&self) -> &[f64] {
        self.weights.as_slice()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// `(wᵢ, μᵢ)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = (f64, &M)> {
        self.weights.as_slice().iter().copied().zip(self.models.iter())
    }
}

impl PriorSet<LocationScatterModel> {
    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }
}

/// A prior set of any kind, as read from a file.
#[derive(Debug, Clone)]
pub enum AnyPriorSet {
    Quantile(PriorSet<QuantileModel>),
    LocationScatter(PriorSet<LocationScatterModel>),
    GridDensity(PriorSet<GridDensityModel>),
}

impl AnyPriorSet {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyPriorSet::Quantile(_) => ModelKind::Quantile,
            AnyPriorSet::LocationScatter(_) => ModelKind::LocationScatter,
            AnyPriorSet::GridDensity(_) => ModelKind::GridDensity,
        }
    }
}

/// Reports every violated invariant of a prior set. Never fails.
pub fn validate_prior_set(ps: &AnyPriorSet) -> ValidationReport {
    match ps {
        AnyPriorSet::Quantile(p) => p.validate(),
        AnyPriorSet::LocationScatter(p) => p.validate(),
        AnyPriorSet::GridDensity(p) => p.validate(),
    }
}

/// `∫₀¹ Φ₀(g(s)) ds` by the grid quadrature.
pub fn quantile_expectation(q: &QuantileModel, phi: &RiskMapping) -> Result<f64> {
    phi.check_dim(1)?;
    let grid = q.grid();
    let mut acc = 0.0;
    for ((&s, &w), &z) in grid.points().iter().zip(grid.weights()).zip(q.values()) {
        let v = phi.eval(&[z]);
        if !v.is_finite() {
            return Err(Error::Evaluation {
                point: format!("s = {s}, z = {z}"),
                reason: format!("mapping returned {v}"),
            });
        }
        acc += w * v;
    }
    Ok(acc)
}

/// An expectation with its Monte Carlo standard error (zero when exact).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub exact: bool,
}

/// `Φ(m,S) = E[Φ₀(m + S^{1/2} Z₀)]`. Polynomial tags use exact moments;
/// anything else is estimated from `n_samples` seeded draws.
pub fn ls_expectation(
    model: &LocationScatterModel,
    phi: &RiskMapping,
    n_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    phi.check_dim(model.dim())?;
    if let Some(value) = exact_ls_expectation(model, phi) {
        return Ok(Estimate {
            value,
            stderr: 0.0,
            exact: true,
        });
    }
    ls_expectation_mc(model, phi, n_samples, seed)
}

fn exact_ls_expectation(model: &LocationScatterModel, phi: &RiskMapping) -> Option<f64> {
    let m = model.location();
    let s = model.scatter().as_matrix();
    match phi {
        RiskMapping::Affine { alpha, b } => Some(alpha + b * m[0]),
        RiskMapping::Quadratic { alpha, b, c } => Some(alpha + b * m[0] + 0.5 * c * (m[0] * m[0] + s[(0, 0)])),
        RiskMapping::LinearMulti { a } => Some(a.dot(m)),
        RiskMapping::QuadraticMulti { a, q } => Some(a.dot(m) + m.dot(&(q * m)) + (q * s).trace()),
        RiskMapping::Custom(_) => None,
    }
}

/// Monte Carlo estimate of `Φ(m,S)` regardless of the mapping tag.
pub fn ls_expectation_mc(
    model: &LocationScatterModel,
    phi: &RiskMapping,
    n_samples: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_samples < 2 {
        return Err(Error::Invalid("need at least 2 Monte Carlo samples".into()));
    }
    phi.check_dim(model.dim())?;
    let d = model.dim();
    let root = sqrt_spd(model.scatter());
    let z0 = model.central().antithetic_matrix(d, n_samples, seed);
    let mut z = root.as_matrix() * &z0;
    for mut col in z.column_iter_mut() {
        col += model.location();
    }
    let mut values = Vec::with_capacity(z.ncols());
    for col in z.column_iter() {
        let v = phi.eval(col.as_slice());
        if !v.is_finite() {
            return Err(Error::Evaluation {
                point: format!("{:?}", col.as_slice()),
                reason: format!("mapping returned {v}"),
            });
        }
        values.push(v);
    }
    Ok(pair_estimate(&values))
}

/// Mean and standard error from antithetic pairs `(v₀,v₁), (v₂,v₃), …`.
pub(crate) fn pair_estimate(values: &[f64]) -> Estimate {
    let pairs: Vec<f64> = values.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    let n = pairs.len() as f64;
    let mean = pairs.iter().sum::<f64>() / n;
    let var = if pairs.len() > 1 {
        pairs.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
        exact: false,
    }
}
