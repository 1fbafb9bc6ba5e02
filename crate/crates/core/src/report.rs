use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::models::{GridDensityModel, LocationScatterModel, QuantileModel};

/// How a risk value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    Foc,
    Direct,
    Perturbative,
    FixedPoint,
    NumericDiff,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ClosedForm => "closed-form",
            Method::Foc => "foc",
            Method::Direct => "direct",
            Method::Perturbative => "perturbative",
            Method::FixedPoint => "fixed-point",
            Method::NumericDiff => "numeric-diff",
        }
    }
}

/// The model attaining the supremum in the robust representation.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Maximizer {
    Quantile(QuantileModel),
    LocationScatter(LocationScatterModel),
    GridDensity(GridDensityModel),
    /// One location-scatter block per risk-factor group.
    Blocks { blocks: Vec<LocationScatterModel> },
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub monotonicity_repairs: usize,
    /// `E[Φ₀]` under the barycenter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barycenter_expectation: Option<f64>,
    /// The penalty term subtracted at the maximizer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    /// Monte Carlo standard error of the value, when sampled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskReport {
    pub value: f64,
    pub gamma: f64,
    pub method: Method,
    pub maximizer: Maximizer,
    pub diagnostics: Diagnostics,
}

impl RiskReport {
    pub fn quantile_maximizer(&self) -> Option<&QuantileModel> {
        match &self.maximizer {
            Maximizer::Quantile(q) => Some(q),
            _ => None,
        }
    }

    pub fn ls_maximizer(&self) -> Option<&LocationScatterModel> {
        match &self.maximizer {
            Maximizer::LocationScatter(m) => Some(m),
            _ => None,
        }
    }

    pub fn density_maximizer(&self) -> Option<&GridDensityModel> {
        match &self.maximizer {
            Maximizer::GridDensity(f) => Some(f),
            _ => None,
        }
    }
}
