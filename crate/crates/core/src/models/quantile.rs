use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::CentralLaw;
use crate::error::{Error, Result};

/// Default number of points on the shared quantile grid.
pub const DEFAULT_GRID_SIZE: usize = 2001;

/// Points `s₁ < … < s_M` in (0,1) with quadrature weights for `∫₀¹ · ds`.
///
/// Each point owns the cell between the midpoints to its neighbours, with
/// the outermost cells running to 0 and 1. On the uniform midpoint grid
/// `sⱼ = (j − ½)/M` every weight is exactly `1/M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        QuantileGrid::new(points).map(|g| (*g).clone())
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.points
    }
}

impl QuantileGrid {
    pub fn uniform(m: usize) -> Arc<Self> {
        assert!(m >= 1, "quantile grid needs at least one point");
        let points = (0..m).map(|j| (j as f64 + 0.5) / m as f64).collect();
        Arc::new(Self::with_weights(points))
    }

    pub fn new(points: Vec<f64>) -> Result<Arc<Self>> {
        if points.is_empty() {
            return Err(Error::Invalid("empty quantile grid".into()));
        }
        for (j, &s) in points.iter().enumerate() {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Invalid(format!("grid point {j} = {s} outside (0,1)")));
            }
            if j > 0 && s <= points[j - 1] {
                return Err(Error::Invalid(format!("grid not strictly increasing at index {j}")));
            }
        }
        Ok(Arc::new(Self::with_weights(points)))
    }

    fn with_weights(points: Vec<f64>) -> Self {
        let m = points.len();
        let uniform = (0..m).all(|j| ((j as f64 + 0.5) / m as f64 - points[j]).abs() < 1e-15);
        let weights = if uniform {
            vec![1.0 / m as f64; m]
        } else {
            (0..m)
                .map(|j| {
                    let lo = if j == 0 { 0.0 } else { 0.5 * (points[j - 1] + points[j]) };
                    let hi = if j + 1 == m { 1.0 } else { 0.5 * (points[j] + points[j + 1]) };
                    hi - lo
                })
                .collect()
        };
        QuantileGrid { points, weights }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.points.len());
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// A one-dimensional law represented by its quantile function on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileModel {
    grid: Arc<QuantileGrid>,
    values: Vec<f64>,
}

impl QuantileModel {
    pub fn new(grid: Arc<QuantileGrid>, values: Vec<f64>) -> Result<Self> {
        let q = Self::new_unchecked(grid, values);
        match q.violations().into_iter().next() {
            Some(v) => Err(Error::Invalid(v)),
            None => Ok(q),
        }
    }

    /// Builds the model without checking monotonicity, for ingestion paths
    /// that report violations through [`super::validate_prior_set`].
    pub fn new_unchecked(grid: Arc<QuantileGrid>, values: Vec<f64>) -> Self {
        QuantileModel { grid, values }
    }

    pub fn from_fn(grid: Arc<QuantileGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.points().iter().map(|&s| f(s)).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Arc<QuantileGrid>, c: f64) -> Self {
        let values = vec![c; grid.len()];
        QuantileModel { grid, values }
    }

    pub fn normal(grid: Arc<QuantileGrid>, mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::Invalid(format!("normal sd must be positive, got {sd}")));
        }
        let n = Normal::standard();
        Self::from_fn(grid, |s| mean + sd * n.inverse_cdf(s))
    }

    /// Student-t law with `df > 4` degrees of freedom, scaled so that its
    /// standard deviation is `sd`.
    pub fn student_t(grid: Arc<QuantileGrid>, mean: f64, sd: f64, df: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::Invalid(format!("student-t sd must be positive, got {sd}")));
        }
        let law = CentralLaw::student_t(df)?;
        Self::from_fn(grid, |s| mean + sd * law.quantile(s))
    }

    /// Quantile function of `m + σ Z₀` for a one-dimensional location-scatter
    /// law with scatter `σ²`.
    pub fn location_scatter(grid: Arc<QuantileGrid>, m: f64, scatter: f64, law: &CentralLaw) -> Result<Self> {
        if !(scatter > 0.0) {
            return Err(Error::Invalid(format!("scatter must be positive, got {scatter}")));
        }
        let sd = scatter.sqrt();
        Self::from_fn(grid, |s| m + sd * law.quantile(s))
    }

    pub fn grid(&self) -> &Arc<QuantileGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    /// Squared 2-Wasserstein distance, i.e. `∫(g − h)² ds`.
    pub fn w2_squared(&self, other: &QuantileModel) -> f64 {
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).collect();
        self.grid.integrate(&diff)
    }

    /// Adds `shift` to every value.
    pub fn shifted(&self, shift: f64) -> QuantileModel {
        QuantileModel {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v + shift).collect(),
        }
    }

    pub fn same_grid(&self, other: &QuantileModel) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || self.grid.points() == other.grid.points()
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.values.len() != self.grid.len() {
            out.push(format!(
                "quantile values have length {} but grid has {} points",
                self.values.len(),
                self.grid.len()
            ));
            return out;
        }
        if let Some(j) = self.values.iter().position(|v| !v.is_finite()) {
            out.push(format!("non-finite quantile value at index {j}"));
        }
        if let Some(j) = (1..self.values.len()).find(|&j| self.values[j] < self.values[j - 1]) {
            out.push(format!("non-monotone quantile at index {j}"));
        }
        out
    }
}
