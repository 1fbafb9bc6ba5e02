use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the trapezoidal mass of a grid density.
pub const DENSITY_MASS_TOL: f64 = 1e-8;

/// Uniform points `lo, lo + h, …, hi` along one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) || n < 2 {
            return Err(Error::Invalid(format!("bad axis [{lo}, {hi}] with {n} points")));
        }
        Ok(Axis { lo, hi, n })
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + self.step() * i as f64
    }

    fn weight(&self, i: usize) -> f64 {
        let h = self.step();
        if i == 0 || i + 1 == self.n {
            0.5 * h
        } else {
            h
        }
    }
}

/// A uniform 1-D grid or a 2-D tensor-product lattice, row-major with the
/// last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    axes: Vec<Axis>,
}

impl DensityGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        match axes.len() {
            1 | 2 => Ok(DensityGrid { axes }),
            0 => Err(Error::Invalid("density grid needs at least one axis".into())),
            d => Err(Error::Invalid(format!(
                "grid densities are limited to d <= 2 (got d = {d}); use location-scatter priors for more factors"
            ))),
        }
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(vec![Axis::new(lo, hi, n)?])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of flat index `k`, written into `out` (length `dim()`).
    pub fn point_into(&self, k: usize, out: &mut [f64]) {
        let mut rem = k;
        for (j, axis) in self.axes.iter().enumerate().rev() {
            out[j] = axis.point(rem % axis.n);
            rem /= axis.n;
        }
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.dim()];
        self.point_into(k, &mut p);
        p
    }

    /// Trapezoidal quadrature weights, one per grid point.
    pub fn weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        match self.axes.as_slice() {
            [a] => out.extend((0..a.n).map(|i| a.weight(i))),
            [a, b] => {
                for i in 0..a.n {
                    for j in 0..b.n {
                        out.push(a.weight(i) * b.weight(j));
                    }
                }
            }
            _ => unreachable!("grid dimension checked at construction"),
        }
        out
    }

    /// True when flat index `k` lies on the outer boundary of the box.
    pub fn on_boundary(&self, k: usize) -> bool {
        let mut rem = k;
        for axis in self.axes.iter().rev() {
            let i = rem % axis.n;
            if i == 0 || i + 1 == axis.n {
                return true;
            }
            rem /= axis.n;
        }
        false
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

/// A probability density sampled on a [`DensityGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensityModel {
    grid: DensityGrid,
    density: Vec<f64>,
}

impl GridDensityModel {
    pub fn new(grid: DensityGrid, density: Vec<f64>) -> Result<Self> {
        let m = Self::new_unchecked(grid, density);
        match m.violations().into_iter().next() {
            Some(v) => Err(Error::Invalid(v)),
            None => Ok(m),
        }
    }

    pub fn new_unchecked(grid: DensityGrid, density: Vec<f64>) -> Self {
        GridDensityModel { grid, density }
    }

    /// Normalizes `exp(log_density)` on the grid, working in log space.
    pub fn from_log_density(grid: DensityGrid, log_density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut p = vec![0.0; grid.dim()];
        let logs: Vec<f64> = (0..grid.len())
            .map(|k| {
                grid.point_into(k, &mut p);
                log_density(&p)
            })
            .collect();
        let (density, _) = normalize_log(&grid, &logs)?;
        Ok(GridDensityModel { grid, density })
    }

    pub fn gaussian_1d(grid: DensityGrid, mean: f64, var: f64) -> Result<Self> {
        if grid.dim() != 1 || !(var > 0.0) {
            return Err(Error::Invalid("gaussian_1d needs a 1-D grid and positive variance".into()));
        }
        Self::from_log_density(grid, |z| -0.5 * (z[0] - mean).powi(2) / var)
    }

    /// Product of independent Gaussians, one per axis.
    pub fn gaussian_product(grid: DensityGrid, means: &[f64], vars: &[f64]) -> Result<Self> {
        if means.len() != grid.dim() || vars.len() != grid.dim() || vars.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("gaussian_product parameters do not match the grid".into()));
        }
        Self::from_log_density(grid, |z| {
            z.iter()
                .zip(means)
                .zip(vars)
                .map(|((x, m), v)| -0.5 * (x - m).powi(2) / v)
                .sum()
        })
    }

    pub fn grid(&self) -> &DensityGrid {
        &self.grid
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.density)
    }

    pub fn mean(&self) -> Vec<f64> {
        let w = self.grid.weights();
        let mut out = vec![0.0; self.grid.dim()];
        let mut p = vec![0.0; self.grid.dim()];
        for (k, (wk, f)) in w.iter().zip(&self.density).enumerate() {
            self.grid.point_into(k, &mut p);
            for (o, x) in out.iter_mut().zip(&p) {
                *o += wk * f * x;
            }
        }
        out
    }

    /// Variance along each axis.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let w = self.grid.weights();
        let mut out = vec![0.0; self.grid.dim()];
        let mut p = vec![0.0; self.grid.dim()];
        for (k, (wk, f)) in w.iter().zip(&self.density).enumerate() {
            self.grid.point_into(k, &mut p);
            for ((o, x), m) in out.iter_mut().zip(&p).zip(&mean) {
                *o += wk * f * (x - m).powi(2);
            }
        }
        out
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.density.len() != self.grid.len() {
            out.push(format!(
                "density has {} values but grid has {} points",
                self.density.len(),
                self.grid.len()
            ));
            return out;
        }
        if let Some(k) = self.density.iter().position(|f| !(f.is_finite() && *f >= 0.0)) {
            out.push(format!("negative or non-finite density at index {k}"));
            return out;
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > DENSITY_MASS_TOL {
            out.push(format!("density integrates to {mass} instead of 1"));
        }
        out
    }
}

/// Normalizes `exp(logs)` to unit trapezoidal mass. Returns the density and
/// `log ∫ exp(logs)`.
pub(crate) fn normalize_log(grid: &DensityGrid, logs: &[f64]) -> Result<(Vec<f64>, f64)> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("log density is -inf or NaN everywhere on the grid".into()));
    }
    let shifted: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let mass = grid.integrate(&shifted);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::Numerical("density has no mass on the grid".into()));
    }
    let log_mass = max + mass.ln();
    Ok((shifted.into_iter().map(|f| f / mass).collect(), log_mass))
}
