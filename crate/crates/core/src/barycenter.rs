//! Fréchet means and variances of prior sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    normalize_log, GridDensityModel, LocationScatterModel, Model, PriorSet, QuantileModel,
};
use crate::spd::{sqrt_psd_product, sqrt_spd, symmetrize, SpdMatrix};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Product masses below this are treated as disjoint support.
pub const DISJOINT_MASS: f64 = 1e-300;
/// Below this product mass the KL barycenter is reported as ill-conditioned.
pub const WEAK_OVERLAP_MASS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarycenterResult<M> {
    pub model: M,
    pub frechet_variance: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `log C₀` for the KL barycenter `f₀ = C₀ Π fᵢ^{wᵢ}`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_c0: Option<f64>,
}

/// Model kinds that have a Fréchet mean.
pub trait FrechetMean: Model {
    fn barycenter(ps: &PriorSet<Self>) -> Result<BarycenterResult<Self>>;

    /// Unnormalized Fréchet function `Σ wᵢ d(candidate, μᵢ)`.
    fn frechet_sum(ps: &PriorSet<Self>, candidate: &Self) -> Result<f64>;
}

/// Normalized Fréchet function `F_M(μ) = Σ wᵢ d(μ, μᵢ) − V_M`.
pub fn frechet_function<M: FrechetMean>(ps: &PriorSet<M>, candidate: &M) -> Result<f64> {
    let v = M::barycenter(ps)?.frechet_variance;
    Ok(M::frechet_sum(ps, candidate)? - v)
}

impl FrechetMean for QuantileModel {
    fn barycenter(ps: &PriorSet<Self>) -> Result<BarycenterResult<Self>> {
        quantile_barycenter(ps)
    }

    fn frechet_sum(ps: &PriorSet<Self>, candidate: &Self) -> Result<f64> {
        check_grid(ps, candidate)?;
        Ok(ps.iter().map(|(w, g)| w * candidate.w2_squared(g)).sum())
    }
}

impl FrechetMean for LocationScatterModel {
    fn barycenter(ps: &PriorSet<Self>) -> Result<BarycenterResult<Self>> {
        ls_wasserstein_barycenter(ps, DEFAULT_TOL, DEFAULT_MAX_ITER)
    }

    fn frechet_sum(ps: &PriorSet<Self>, candidate: &Self) -> Result<f64> {
        if candidate.dim() != ps.dim() {
            return Err(Error::Dimension(format!(
                "candidate has dimension {}, priors have {}",
                candidate.dim(),
                ps.dim()
            )));
        }
        let (mean, scatter) = ls_frechet_parts(ps, candidate.location(), candidate.scatter())?;
        Ok(mean + scatter)
    }
}

impl FrechetMean for GridDensityModel {
    fn barycenter(ps: &PriorSet<Self>) -> Result<BarycenterResult<Self>> {
        kl_barycenter(ps)
    }

    fn frechet_sum(ps: &PriorSet<Self>, candidate: &Self) -> Result<f64> {
        if candidate.grid() != ps.models()[0].grid() {
            return Err(Error::Dimension("candidate density lives on a different grid".into()));
        }
        Ok(ps.iter().filter(|(w, _)| *w > 0.0).map(|(w, f)| w * kl_divergence(candidate, f)).sum())
    }
}

fn check_grid(ps: &PriorSet<QuantileModel>, q: &QuantileModel) -> Result<()> {
    if ps.models().iter().all(|g| g.same_grid(q)) {
        Ok(())
    } else {
        Err(Error::Dimension("quantile models live on different grids".into()))
    }
}

/// `g_B = Σ wᵢ gᵢ` pointwise, with `V = Σ wᵢ ∫(g_B − gᵢ)²`.
pub fn quantile_barycenter(ps: &PriorSet<QuantileModel>) -> Result<BarycenterResult<QuantileModel>> {
    let first = &ps.models()[0];
    check_grid(ps, first)?;
    let mut values = vec![0.0; first.len()];
    for (w, g) in ps.iter() {
        for (v, x) in values.iter_mut().zip(g.values()) {
            *v += w * x;
        }
    }
    // a convex combination of non-decreasing arrays is non-decreasing
    let model = QuantileModel::new_unchecked(first.grid().clone(), values);
    let variance: f64 = ps.iter().map(|(w, g)| w * model.w2_squared(g)).sum();
    Ok(BarycenterResult {
        model,
        frechet_variance: variance.max(0.0),
        iterations: 0,
        residual: 0.0,
        log_c0: None,
    })
}

/// Squared 2-Wasserstein distance between two members of one location-scatter family.
pub fn ls_w2_squared(m1: &DVector<f64>, s1: &SpdMatrix, m2: &DVector<f64>, s2: &SpdMatrix) -> Result<f64> {
    let r2 = sqrt_spd(s2);
    let cross = sqrt_psd_product(&(r2.as_matrix() * s1.as_matrix() * r2.as_matrix()))?;
    Ok((m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace())
}

/// The two halves of `Σ wᵢ W₂²((m,S),(mᵢ,Sᵢ))`: `Σ wᵢ‖m − mᵢ‖²` and the
/// scatter part `Σ wᵢ Tr(S + Sᵢ − 2(S^{1/2} Sᵢ S^{1/2})^{1/2})`.
pub fn ls_frechet_parts(ps: &PriorSet<LocationScatterModel>, m: &DVector<f64>, s: &SpdMatrix) -> Result<(f64, f64)> {
    let r = sqrt_spd(s);
    let mut mean = 0.0;
    let mut scatter = 0.0;
    for (w, p) in ps.iter() {
        mean += w * (m - p.location()).norm_squared();
        let cross = sqrt_psd_product(&(r.as_matrix() * p.scatter().as_matrix() * r.as_matrix()))?;
        scatter += w * (s.trace() + p.scatter().trace() - 2.0 * cross.trace());
    }
    Ok((mean, scatter))
}

/// `T(S) = Σ wᵢ (S^{1/2} Sᵢ S^{1/2})^{1/2}` given `R = S^{1/2}`.
pub(crate) fn barycentric_map(ps: &PriorSet<LocationScatterModel>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = r.nrows();
    let mut t = DMatrix::zeros(d, d);
    for (w, p) in ps.iter() {
        let root = sqrt_psd_product(&(r * p.scatter().as_matrix() * r))?;
        t += root.as_matrix() * w;
    }
    Ok(symmetrize(&t))
}

/// Checks an iterate and returns it as an SPD matrix.
pub(crate) fn spd_iterate(m: DMatrix<f64>) -> Result<SpdMatrix> {
    SpdMatrix::new(symmetrize(&m)).map_err(|e| Error::Numerical(format!("non-SPD iterate: {e}")))
}

/// Wasserstein barycenter of a location-scatter prior set.
///
/// The mean is the weighted mean. The scatter solves
/// `S = Σ wᵢ (S^{1/2} Sᵢ S^{1/2})^{1/2}`, iterating
/// `S ← S^{-1/2} T(S)² S^{-1/2}` from `Σ wᵢ Sᵢ` until both the step and the
/// equation residual fall below `tol` relative to `‖S‖`.
pub fn ls_wasserstein_barycenter(
    ps: &PriorSet<LocationScatterModel>,
    tol: f64,
    max_iter: usize,
) -> Result<BarycenterResult<LocationScatterModel>> {
    let d = ps.dim();
    let mut m_b = DVector::zeros(d);
    let mut s0 = DMatrix::zeros(d, d);
    for (w, p) in ps.iter() {
        m_b += p.location() * w;
        s0 += p.scatter().as_matrix() * w;
    }
    let mut s = spd_iterate(s0)?;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let r = sqrt_spd(&s);
        let t = barycentric_map(ps, r.as_matrix())?;
        let norm = s.as_matrix().norm();
        residual = (s.as_matrix() - &t).norm() / norm;
        let ri = s.inv_sqrt();
        let next = spd_iterate(ri.as_matrix() * &t * &t * ri.as_matrix())?;
        let step = (next.as_matrix() - s.as_matrix()).norm() / norm;
        if residual <= tol && step <= tol {
            break;
        }
        s = next;
    }
    if residual > tol {
        return Err(Error::NoConvergence {
            iterations,
            residual,
            hint: "barycenter fixed point; raise max_iter or check prior scatters".into(),
        });
    }
    let model = LocationScatterModel::new(m_b, s, ps.models()[0].central())?;
    let (mean, scatter) = ls_frechet_parts(ps, model.location(), model.scatter())?;
    Ok(BarycenterResult {
        model,
        frechet_variance: (mean + scatter).max(0.0),
        iterations,
        residual,
        log_c0: None,
    })
}

/// `Σ wᵢ log fᵢ` on the grid, `−∞` where some weighted density vanishes.
pub(crate) fn log_geometric_mean(ps: &PriorSet<GridDensityModel>) -> Vec<f64> {
    let n = ps.models()[0].grid().len();
    let mut logs = vec![0.0; n];
    for (w, f) in ps.iter() {
        if w == 0.0 {
            continue;
        }
        for (l, &x) in logs.iter_mut().zip(f.density()) {
            *l += if x > 0.0 { w * x.ln() } else { f64::NEG_INFINITY };
        }
    }
    logs
}

/// KL barycenter `f₀ = C₀ Π fᵢ^{wᵢ}` with Fréchet variance `Σ wᵢ KL(f₀‖fᵢ)`.
pub fn kl_barycenter(ps: &PriorSet<GridDensityModel>) -> Result<BarycenterResult<GridDensityModel>> {
    let grid = ps.models()[0].grid().clone();
    if ps.models().iter().any(|f| f.grid() != &grid) {
        return Err(Error::Dimension("densities live on different grids".into()));
    }
    let logs = log_geometric_mean(ps);
    let (density, log_mass) = match normalize_log(&grid, &logs) {
        Ok(v) => v,
        Err(_) => return Err(Error::DisjointSupport { mass: 0.0 }),
    };
    if log_mass < DISJOINT_MASS.ln() {
        return Err(Error::DisjointSupport { mass: log_mass.exp() });
    }
    let model = GridDensityModel::new_unchecked(grid, density);
    let variance: f64 = ps.iter().filter(|(w, _)| *w > 0.0).map(|(w, f)| w * kl_divergence(&model, f)).sum();
    Ok(BarycenterResult {
        model,
        frechet_variance: variance.max(0.0),
        iterations: 0,
        residual: 0.0,
        log_c0: Some(-log_mass),
    })
}

/// `∫ f log(f/g)` by the grid quadrature; `+∞` if `f` charges a zero of `g`.
pub fn kl_divergence(f: &GridDensityModel, g: &GridDensityModel) -> f64 {
    let w = f.grid().weights();
    let mut acc = 0.0;
    for ((wk, &a), &b) in w.iter().zip(f.density()).zip(g.density()) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            acc += wk * a * (a / b).ln();
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CentralLaw, DensityGrid, QuantileGrid, DEFAULT_GRID_SIZE};
    use nalgebra::dvector;

    #[test]
    fn single_quantile_prior_is_its_own_barycenter() {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        let q = QuantileModel::normal(g, 1.0, 2.0).unwrap();
        let ps = PriorSet::uniform(vec![q.clone()]).unwrap();
        let b = quantile_barycenter(&ps).unwrap();
        assert_eq!(b.model, q);
        assert_eq!(b.frechet_variance, 0.0);
    }

    #[test]
    fn constant_quantiles_average() {
        let g = QuantileGrid::uniform(11);
        let ps = PriorSet::uniform(vec![QuantileModel::constant(g.clone(), 0.0), QuantileModel::constant(g, 2.0)]).unwrap();
        let b = quantile_barycenter(&ps).unwrap();
        assert!(b.model.values().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!((b.frechet_variance - 1.0).abs() < 1e-14);
    }

    #[test]
    fn shifted_normals_average_to_the_middle() {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        let ps = PriorSet::uniform(vec![
            QuantileModel::normal(g.clone(), 0.0, 1.0).unwrap(),
            QuantileModel::normal(g.clone(), 2.0, 1.0).unwrap(),
        ])
        .unwrap();
        let b = quantile_barycenter(&ps).unwrap();
        let expect = QuantileModel::normal(g, 1.0, 1.0).unwrap();
        for (x, y) in b.model.values().iter().zip(expect.values()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn frechet_function_of_shifted_barycenter() {
        let g = QuantileGrid::uniform(DEFAULT_GRID_SIZE);
        let ps = PriorSet::uniform(vec![
            QuantileModel::normal(g.clone(), 0.0, 1.0).unwrap(),
            QuantileModel::normal(g, 2.0, 3.0).unwrap(),
        ])
        .unwrap();
        let b = quantile_barycenter(&ps).unwrap();
        assert!(frechet_function(&ps, &b.model).unwrap().abs() < 1e-8);
        let f = frechet_function(&ps, &b.model.shifted(1.0)).unwrap();
        assert!((f - 1.0).abs() < 1e-10, "{f}");
    }

    fn scalar_ls(m: f64, s: f64) -> LocationScatterModel {
        LocationScatterModel::scalar(m, s, CentralLaw::Normal).unwrap()
    }

    #[test]
    fn ls_barycenter_single_prior() {
        let p = LocationScatterModel::gaussian(
            dvector![1.0, -2.0],
            SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap(),
        )
        .unwrap();
        let ps = PriorSet::uniform(vec![p.clone()]).unwrap();
        let b = ls_wasserstein_barycenter(&ps, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(b.model.location(), p.location());
        assert!((b.model.scatter().as_matrix() - p.scatter().as_matrix()).norm() < 1e-12);
        assert!(b.frechet_variance < 1e-12);
    }

    #[test]
    fn ls_barycenter_scalar_formula() {
        let ps = PriorSet::uniform(vec![scalar_ls(0.0, 1.0), scalar_ls(0.0, 4.0)]).unwrap();
        let b = ls_wasserstein_barycenter(&ps, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((b.model.scatter().as_matrix()[(0, 0)] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn ls_barycenter_commuting_diagonals() {
        let mk = |x: f64| LocationScatterModel::gaussian(dvector![0.0, 0.0], SpdMatrix::from_diagonal(&[x, x]).unwrap()).unwrap();
        let ps = PriorSet::uniform(vec![mk(1.0), mk(4.0)]).unwrap();
        let b = ls_wasserstein_barycenter(&ps, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let expect = DMatrix::from_diagonal(&dvector![2.25, 2.25]);
        assert!((b.model.scatter().as_matrix() - expect).norm() < 1e-12);
        assert!(b.residual < 1e-10);
    }

    #[test]
    fn ls_frechet_function_mean_shift() {
        let ps = PriorSet::uniform(vec![scalar_ls(0.0, 1.0), scalar_ls(3.0, 4.0)]).unwrap();
        let b = ls_wasserstein_barycenter(&ps, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(frechet_function(&ps, &b.model).unwrap().abs() < 1e-8);
        let delta = 0.3;
        let shifted = LocationScatterModel::new(
            b.model.location().add_scalar(delta),
            b.model.scatter().clone(),
            CentralLaw::Normal,
        )
        .unwrap();
        let f = frechet_function(&ps, &shifted).unwrap();
        assert!((f - delta * delta).abs() < 1e-10);
    }

    fn gaussian_density(grid: &DensityGrid, mean: f64, var: f64) -> GridDensityModel {
        GridDensityModel::gaussian_1d(grid.clone(), mean, var).unwrap()
    }

    #[test]
    fn kl_barycenter_of_identical_priors() {
        let grid = DensityGrid::line(-10.0, 10.0, 2001).unwrap();
        let f = gaussian_density(&grid, 0.5, 2.0);
        let ps = PriorSet::uniform(vec![f.clone(), f.clone()]).unwrap();
        let b = kl_barycenter(&ps).unwrap();
        for (x, y) in b.model.density().iter().zip(f.density()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(b.frechet_variance.abs() < 1e-12);
    }

    #[test]
    fn kl_barycenter_precision_weighting() {
        let grid = DensityGrid::line(-15.0, 15.0, 4001).unwrap();
        let ps = PriorSet::uniform(vec![gaussian_density(&grid, 0.0, 1.0), gaussian_density(&grid, 1.0, 1.0)]).unwrap();
        let b = kl_barycenter(&ps).unwrap();
        assert!((b.model.mean()[0] - 0.5).abs() < 1e-4);
        assert!((b.model.variance()[0] - 1.0).abs() < 1e-4);

        let ps = PriorSet::uniform(vec![gaussian_density(&grid, 0.0, 1.0), gaussian_density(&grid, 0.0, 4.0)]).unwrap();
        let b = kl_barycenter(&ps).unwrap();
        assert!((b.model.variance()[0] - 1.6).abs() < 1e-3);
        assert!((b.frechet_variance - b.log_c0.unwrap()).abs() < 1e-8);
    }

    #[test]
    fn kl_barycenter_detects_disjoint_support() {
        let grid = DensityGrid::line(0.0, 1.0, 11).unwrap();
        let mut a = vec![0.0; 11];
        let mut b = vec![0.0; 11];
        a[..5].iter_mut().for_each(|x| *x = 2.0);
        b[6..].iter_mut().for_each(|x| *x = 2.0);
        let ps = PriorSet::from_parts_unchecked(
            vec![GridDensityModel::new_unchecked(grid.clone(), a), GridDensityModel::new_unchecked(grid, b)],
            crate::models::WeightVector::uniform(2),
        );
        assert!(matches!(kl_barycenter(&ps), Err(Error::DisjointSupport { .. })));
    }
}
