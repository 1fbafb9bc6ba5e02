//! Weighted entropic risk: `(1/γ) log ∫ e^{γΦ₀} f₀` with `f₀` the KL
//! barycenter of grid densities.

use crate::barycenter::{kl_barycenter, kl_divergence, log_geometric_mean, BarycenterResult, WEAK_OVERLAP_MASS};
use crate::error::{Error, Result};
use crate::models::{normalize_log, DensityGrid, GridDensityModel, PriorSet, RiskMapping};
use crate::report::{Diagnostics, Maximizer, Method, RiskReport};

/// Tilted mass allowed on the outer boundary of the grid.
pub const BOUNDARY_MASS_TOL: f64 = 1e-6;
/// Points per axis of the default 1-D grid.
pub const DEFAULT_POINTS: usize = 4001;
/// Padding of the default grid, in prior standard deviations.
pub const DEFAULT_PADDING: f64 = 6.0;

/// A 1-D grid spanning every `(mean, sd)` padded by `padding` standard deviations.
pub fn default_grid(params: &[(f64, f64)], padding: f64, points: usize) -> Result<DensityGrid> {
    let lo = params.iter().map(|(m, s)| m - padding * s).fold(f64::INFINITY, f64::min);
    let hi = params.iter().map(|(m, s)| m + padding * s).fold(f64::NEG_INFINITY, f64::max);
    DensityGrid::line(lo, hi, points)
}

fn mapping_values(grid: &DensityGrid, phi: &RiskMapping) -> Result<Vec<f64>> {
    phi.check_dim(grid.dim())?;
    let mut p = vec![0.0; grid.dim()];
    (0..grid.len())
        .map(|k| {
            grid.point_into(k, &mut p);
            let v = phi.eval(&p);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Evaluation {
                    point: format!("{p:?}"),
                    reason: format!("mapping returned {v}"),
                })
            }
        })
        .collect()
}

fn boundary_mass(model: &GridDensityModel) -> f64 {
    let grid = model.grid();
    let w = grid.weights();
    (0..grid.len())
        .filter(|&k| grid.on_boundary(k))
        .map(|k| w[k] * model.density()[k])
        .sum()
}

fn check_truncation(tilted: &GridDensityModel) -> Result<()> {
    let mass = boundary_mass(tilted);
    if mass > BOUNDARY_MASS_TOL {
        return Err(Error::Numerical(format!(
            "tilted density puts mass {mass:.3e} on the grid boundary: e^(gamma*phi) outgrows the priors \
             (log-sum-exp already applied), so grid truncation dominates; widen the grid or lower gamma"
        )));
    }
    Ok(())
}

/// Closed form of the weighted entropic risk. The maximizing density is
/// `∝ e^{γΦ₀} Π fᵢ^{wᵢ}`.
pub fn entropic_risk(ps: &PriorSet<GridDensityModel>, phi: &RiskMapping, gamma: f64) -> Result<RiskReport> {
    crate::risk1d::check_gamma(gamma)?;
    entropic_risk_from_barycenter(&kl_barycenter(ps)?, phi, gamma)
}

/// [`entropic_risk`] for a KL barycenter computed once and reused across
/// mappings or values of γ.
pub fn entropic_risk_from_barycenter(
    bary: &BarycenterResult<GridDensityModel>,
    phi: &RiskMapping,
    gamma: f64,
) -> Result<RiskReport> {
    crate::risk1d::check_gamma(gamma)?;
    let f0 = &bary.model;
    let grid = f0.grid().clone();
    let values = mapping_values(&grid, phi)?;
    let logs: Vec<f64> = values
        .iter()
        .zip(f0.density())
        .map(|(v, &f)| if f > 0.0 { gamma * v + f.ln() } else { f64::NEG_INFINITY })
        .collect();
    let (density, log_mass) = normalize_log(&grid, &logs)?;
    let tilted = GridDensityModel::new_unchecked(grid.clone(), density);
    check_truncation(&tilted)?;
    let value = log_mass / gamma;
    let base = grid.integrate(&values.iter().zip(f0.density()).map(|(v, f)| v * f).collect::<Vec<_>>());
    let mut notes = Vec::new();
    if let Some(log_c0) = bary.log_c0.filter(|&l| l > -WEAK_OVERLAP_MASS.ln()) {
        notes.push(format!(
            "priors barely overlap (geometric-mean mass {:.3e}); the barycenter is ill-conditioned",
            (-log_c0).exp()
        ));
    }
    Ok(RiskReport {
        value,
        gamma,
        method: Method::ClosedForm,
        maximizer: Maximizer::GridDensity(tilted),
        diagnostics: Diagnostics {
            barycenter_expectation: Some(base),
            penalty: Some(value - base),
            residual: (bary.frechet_variance - bary.log_c0.unwrap_or(0.0)).abs(),
            notes,
            ..Default::default()
        },
    })
}

/// Maximizes `∫ pΦ₀ − (1/γ)(Σ wᵢ KL(p‖fᵢ) − V)` over grid densities by
/// entropic mirror ascent, stopping when the log-density moves less than
/// `ascent_tol` anywhere.
pub fn entropic_risk_direct(ps: &PriorSet<GridDensityModel>, phi: &RiskMapping, gamma: f64, ascent_tol: f64) -> Result<RiskReport> {
    crate::risk1d::check_gamma(gamma)?;
    let bary = kl_barycenter(ps)?;
    let grid = bary.model.grid().clone();
    let values = mapping_values(&grid, phi)?;
    let log_fg = log_geometric_mean(ps);
    let w = grid.weights();
    // mirror step η = γ/2 on the cell masses: log p ← ½ log p + ½(γΦ₀ + log f_G) + const
    let eta = 0.5 * gamma;
    let mut log_p: Vec<f64> = bary.model.density().iter().map(|f| if *f > 0.0 { f.ln() } else { f64::NEG_INFINITY }).collect();
    let max_iter = 10_000;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < max_iter && change > ascent_tol {
        iterations += 1;
        let next: Vec<f64> = log_p
            .iter()
            .zip(&values)
            .zip(&log_fg)
            .map(|((&lp, &v), &lg)| {
                if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    // gradient of the objective in the cell masses: Φ₀ − (1/γ)(log(p/f_G) + 1)
                    lp + eta * (v - (lp - lg) / gamma)
                }
            })
            .collect();
        let (dens, _) = normalize_log(&grid, &next)?;
        let normalized: Vec<f64> = dens.iter().map(|d| if *d > 0.0 { d.ln() } else { f64::NEG_INFINITY }).collect();
        change = normalized
            .iter()
            .zip(&log_p)
            .filter(|(a, _)| a.is_finite())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        log_p = normalized;
    }
    if change > ascent_tol {
        return Err(Error::NoConvergence {
            iterations,
            residual: change,
            hint: "entropic mirror ascent".into(),
        });
    }
    let density: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let p = GridDensityModel::new_unchecked(grid.clone(), density);
    check_truncation(&p)?;
    let expectation: f64 = (0..grid.len()).map(|k| w[k] * p.density()[k] * values[k]).sum();
    let divergence: f64 = ps.iter().filter(|(wi, _)| *wi > 0.0).map(|(wi, f)| wi * kl_divergence(&p, f)).sum();
    let penalty = (divergence - bary.frechet_variance) / gamma;
    let base: f64 = (0..grid.len()).map(|k| w[k] * bary.model.density()[k] * values[k]).sum();
    Ok(RiskReport {
        value: expectation - penalty,
        gamma,
        method: Method::Direct,
        maximizer: Maximizer::GridDensity(p),
        diagnostics: Diagnostics {
            iterations,
            residual: change,
            barycenter_expectation: Some(base),
            penalty: Some(penalty),
            ..Default::default()
        },
    })
}
