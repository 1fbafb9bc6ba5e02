//! JSON documents for models, prior sets, mappings and portfolios.
//!
//! A prior set file looks like
//!
//! ```json
//! {
//!   "models": [
//!     {"kind": "location-scatter", "m": [0, 1], "S": [[1, 0], [0, 2]], "central": "normal"},
//!     "expert_b.json"
//!   ],
//!   "weights": [0.5, 0.5]
//! }
//! ```
//!
//! where a string entry is a model file relative to the prior set file.
//! Weights default to uniform.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    AnyPriorSet, Axis, CentralLaw, DensityGrid, GridDensityModel, LocationScatterModel, ModelKind, PriorSet,
    QuantileGrid, QuantileModel, RiskMapping, ValidationReport, Violation, WeightVector, DEFAULT_GRID_SIZE,
};
use crate::spd::SpdMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentralName {
    Normal,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyParams {
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
    pub df: Option<f64>,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams { mean: 0.0, sd: 1.0, df: None }
    }
}

fn one() -> f64 {
    1.0
}

fn default_grid_size() -> usize {
    DEFAULT_GRID_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileFamily {
    Normal,
    StudentT,
    /// Quantile values given directly on the midpoint grid.
    Values,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityFamily {
    Gaussian,
    Values,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
}

/// One model as written in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    LocationScatter {
        m: Vec<f64>,
        #[serde(rename = "S")]
        s: Vec<Vec<f64>>,
        #[serde(default = "normal_name")]
        central: CentralName,
        #[serde(default)]
        df: Option<f64>,
    },
    Quantile {
        #[serde(default = "default_grid_size")]
        grid_size: usize,
        family: QuantileFamily,
        #[serde(default)]
        params: FamilyParams,
        #[serde(default)]
        values: Option<Vec<f64>>,
    },
    GridDensity {
        grid: GridSpec,
        family: DensityFamily,
        #[serde(default)]
        mean: Vec<f64>,
        #[serde(default)]
        var: Vec<f64>,
        #[serde(default)]
        density: Option<Vec<f64>>,
    },
}

fn normal_name() -> CentralName {
    CentralName::Normal
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::LocationScatter { .. } => ModelKind::LocationScatter,
            ModelSpec::Quantile { .. } => ModelKind::Quantile,
            ModelSpec::GridDensity { .. } => ModelKind::GridDensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelEntry {
    Path(PathBuf),
    Inline(ModelSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSetSpec {
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

fn central_law(central: &CentralName, df: Option<f64>) -> Result<CentralLaw> {
    match (central, df) {
        (CentralName::Normal, None) => Ok(CentralLaw::Normal),
        (CentralName::Normal, Some(_)) => Err(Error::Invalid("df given for a normal central law".into())),
        (CentralName::StudentT, Some(df)) => CentralLaw::student_t(df),
        (CentralName::StudentT, None) => Err(Error::Invalid("student-t central law needs df".into())),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("{what} must be a square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Builds models without rejecting broken invariants where the model type
/// can carry them, so that [`PriorSet::validate`] reports all of them at once.
struct Builder {
    quantile_grids: HashMap<usize, Arc<QuantileGrid>>,
}

impl Builder {
    fn quantile_grid(&mut self, m: usize) -> Arc<QuantileGrid> {
        self.quantile_grids.entry(m).or_insert_with(|| QuantileGrid::uniform(m)).clone()
    }

    fn location_scatter(&self, spec: &ModelSpec) -> Result<LocationScatterModel> {
        let ModelSpec::LocationScatter { m, s, central, df } = spec else { unreachable!() };
        let s = SpdMatrix::new(matrix(s, "S")?)?;
        LocationScatterModel::new(DVector::from_vec(m.clone()), s, central_law(central, *df)?)
    }

    fn quantile(&mut self, spec: &ModelSpec) -> Result<QuantileModel> {
        let ModelSpec::Quantile { grid_size, family, params, values } = spec else { unreachable!() };
        if *grid_size < 2 {
            return Err(Error::Invalid(format!("quantile grid needs at least 2 points, got {grid_size}")));
        }
        let grid = self.quantile_grid(*grid_size);
        match family {
            QuantileFamily::Normal => QuantileModel::normal(grid, params.mean, params.sd),
            QuantileFamily::StudentT => {
                let df = params.df.ok_or_else(|| Error::Invalid("student-t family needs params.df".into()))?;
                QuantileModel::student_t(grid, params.mean, params.sd, df)
            }
            QuantileFamily::Values => {
                let v = values.clone().ok_or_else(|| Error::Invalid("values family needs a values array".into()))?;
                if v.len() != grid.len() {
                    return Err(Error::Dimension(format!("{} quantile values for a grid of {}", v.len(), grid.len())));
                }
                Ok(QuantileModel::new_unchecked(grid, v))
            }
        }
    }

    fn grid_density(&self, spec: &ModelSpec) -> Result<GridDensityModel> {
        let ModelSpec::GridDensity { grid, family, mean, var, density } = spec else { unreachable!() };
        let axes = grid.axes.iter().map(|a| Axis::new(a.lo, a.hi, a.n)).collect::<Result<Vec<_>>>()?;
        let grid = DensityGrid::new(axes)?;
        match family {
            DensityFamily::Gaussian => {
                if mean.len() != grid.dim() || var.len() != grid.dim() {
                    return Err(Error::Dimension(format!("gaussian density on a {}-d grid needs {0} means and variances", grid.dim())));
                }
                GridDensityModel::gaussian_product(grid, mean, var)
            }
            DensityFamily::Values => {
                let d = density.clone().ok_or_else(|| Error::Invalid("values family needs a density array".into()))?;
                if d.len() != grid.len() {
                    return Err(Error::Dimension(format!("{} density values for a grid of {}", d.len(), grid.len())));
                }
                Ok(GridDensityModel::new_unchecked(grid, d))
            }
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_model(json: &str) -> Result<ModelSpec> {
    serde_json::from_str(json).map_err(|e| Error::Invalid(format!("model: {e}")))
}

/// Loads a prior set. Every broken invariant (unparseable model, non-SPD
/// scatter, non-monotone quantiles, weights off the simplex, mixed kinds)
/// is collected into one [`Error::Invalid`].
pub fn read_prior_set(path: &Path) -> Result<AnyPriorSet> {
    let spec: PriorSetSpec = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    prior_set_from_spec(&spec, base)
}

pub fn parse_prior_set(json: &str, base: &Path) -> Result<AnyPriorSet> {
    let spec: PriorSetSpec = serde_json::from_str(json).map_err(|e| Error::Invalid(format!("prior set: {e}")))?;
    prior_set_from_spec(&spec, base)
}

pub fn prior_set_from_spec(spec: &PriorSetSpec, base: &Path) -> Result<AnyPriorSet> {
    let mut violations = Vec::new();
    let mut specs = Vec::with_capacity(spec.models.len());
    for (i, entry) in spec.models.iter().enumerate() {
        match entry {
            ModelEntry::Inline(m) => specs.push(Some(m.clone())),
            ModelEntry::Path(p) => match read_json::<ModelSpec>(&base.join(p)) {
                Ok(m) => specs.push(Some(m)),
                Err(e) => {
                    violations.push(Violation::at(i, e.to_string()));
                    specs.push(None);
                }
            },
        }
    }
    let kind = specs.iter().flatten().map(ModelSpec::kind).next();
    for (i, s) in specs.iter().enumerate() {
        if let (Some(s), Some(k)) = (s, kind) {
            if s.kind() != k {
                violations.push(Violation::at(i, format!("{} model in a {} prior set", s.kind().as_str(), k.as_str())));
            }
        }
    }
    let n = spec.models.len();
    let weights = WeightVector::new_unchecked(spec.weights.clone().unwrap_or_else(|| vec![1.0 / n.max(1) as f64; n]));
    let weight_violations = weights.violations();
    let mut builder = Builder {
        quantile_grids: HashMap::new(),
    };
    fn collect<M>(
        specs: &[Option<ModelSpec>],
        kind: ModelKind,
        violations: &mut Vec<Violation>,
        mut build: impl FnMut(&ModelSpec) -> Result<M>,
    ) -> Vec<M> {
        let mut out = Vec::new();
        for (i, s) in specs.iter().enumerate() {
            if let Some(s) = s.as_ref().filter(|s| s.kind() == kind) {
                match build(s) {
                    Ok(m) => out.push(m),
                    Err(e) => violations.push(Violation::at(i, e.to_string())),
                }
            }
        }
        out
    }
    let any = match kind {
        None if violations.is_empty() => return Err(Error::Invalid("prior set is empty".into())),
        None => {
            violations.extend(weight_violations);
            return ValidationReport { violations }.into_result().map(|_| unreachable!());
        }
        Some(ModelKind::LocationScatter) => {
            let models = collect(&specs, ModelKind::LocationScatter, &mut violations, |s| builder.location_scatter(s));
            AnyPriorSet::LocationScatter(PriorSet::from_parts_unchecked(models, weights))
        }
        Some(ModelKind::Quantile) => {
            let models = collect(&specs, ModelKind::Quantile, &mut violations, |s| builder.quantile(s));
            AnyPriorSet::Quantile(PriorSet::from_parts_unchecked(models, weights))
        }
        Some(ModelKind::GridDensity) => {
            let models = collect(&specs, ModelKind::GridDensity, &mut violations, |s| builder.grid_density(s));
            AnyPriorSet::GridDensity(PriorSet::from_parts_unchecked(models, weights))
        }
    };
    if violations.is_empty() {
        violations = crate::models::validate_prior_set(&any).violations;
    } else {
        violations.extend(weight_violations);
    }
    ValidationReport { violations }.into_result()?;
    Ok(any)
}

/// A risk mapping as written in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MappingSpec {
    Affine {
        #[serde(default)]
        alpha: f64,
        b: f64,
    },
    /// `α + bz + ½cz²`.
    Quadratic {
        #[serde(default)]
        alpha: f64,
        b: f64,
        c: f64,
    },
    LinearMulti {
        a: Vec<f64>,
    },
    /// `⟨a, z⟩ + zᵀQz`.
    QuadraticMulti {
        a: Vec<f64>,
        q: Vec<Vec<f64>>,
    },
    Softplus {
        a: Vec<f64>,
    },
    Exponential {
        #[serde(default = "one")]
        scale: f64,
        a: Vec<f64>,
    },
    Polynomial {
        coeffs: Vec<f64>,
    },
    Product {
        dim: usize,
    },
}

impl MappingSpec {
    pub fn build(&self) -> Result<RiskMapping> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        Ok(match self {
            MappingSpec::Affine { alpha, b } => RiskMapping::affine(*alpha, *b),
            MappingSpec::Quadratic { alpha, b, c } => RiskMapping::quadratic(*alpha, *b, *c),
            MappingSpec::LinearMulti { a } => RiskMapping::linear_multi(DVector::from_vec(a.clone())),
            MappingSpec::QuadraticMulti { a, q } => {
                let q = matrix(q, "q")?;
                if q.nrows() != a.len() {
                    return Err(Error::Dimension(format!("a has length {} but q is {}x{}", a.len(), q.nrows(), q.nrows())));
                }
                RiskMapping::quadratic_multi(DVector::from_vec(a.clone()), q)?
            }
            MappingSpec::Softplus { a } if finite(a) && !a.is_empty() => RiskMapping::softplus(a.clone()),
            MappingSpec::Exponential { scale, a } if finite(a) && !a.is_empty() => RiskMapping::exponential(*scale, a.clone()),
            MappingSpec::Polynomial { coeffs } if finite(coeffs) && !coeffs.is_empty() => RiskMapping::polynomial(coeffs.clone()),
            MappingSpec::Product { dim } if *dim >= 1 => RiskMapping::product(*dim),
            other => return Err(Error::Invalid(format!("empty or non-finite coefficients in mapping {other:?}"))),
        })
    }
}

pub fn read_mapping(path: &Path) -> Result<RiskMapping> {
    read_json::<MappingSpec>(path)?.build()
}

pub fn parse_mapping(json: &str) -> Result<RiskMapping> {
    serde_json::from_str::<MappingSpec>(json)
        .map_err(|e| Error::Invalid(format!("mapping: {e}")))?
        .build()
}

/// Sector loss mappings of a portfolio, `{"sectors": [mapping, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSpec {
    pub sectors: Vec<MappingSpec>,
}

pub fn read_portfolio(path: &Path) -> Result<Vec<RiskMapping>> {
    let spec: PortfolioSpec = read_json(path)?;
    if spec.sectors.is_empty() {
        return Err(Error::Invalid(format!("{}: portfolio has no sectors", path.display())));
    }
    spec.sectors.iter().map(MappingSpec::build).collect()
}

pub fn read_study_config(path: &Path) -> Result<crate::premia::SimulationConfig> {
    let cfg: crate::premia::SimulationConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}
