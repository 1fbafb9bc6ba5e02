//! Euler allocation of Wasserstein barycentric risk to portfolio sectors.
//!
//! Sector `j` receives `d/dh ρ(X + h X_j)` at `h = 0`. The perturbative
//! path differentiates the first-order expansion in closed form; the
//! numeric path takes central differences of the fixed-point risk.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{LocationScatterModel, PriorSet, RiskMapping};
use crate::report::Method;
use crate::risk_ls::{eval_at, fixed_point, perturbation_solution, setup, LsOptions, Tangent};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct AllocationReport {
    pub total_risk: f64,
    pub contributions: Vec<f64>,
    pub method: Method,
    pub gamma: f64,
    /// `Σ contributions − total_risk`; positive for γ > 0 since the measure is
    /// convex rather than positively homogeneous.
    pub euler_gap: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
    /// Per sector, `Tr(C S̃′) + ½ Σ wᵢ Tr Z′ᵢ`, which vanishes because `S̃`
    /// is stationary.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stationarity: Vec<f64>,
}

impl AllocationReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.values().copied().fold(0.0, f64::max)
    }
}

fn total_mapping(mappings: &[RiskMapping], d: usize) -> Result<RiskMapping> {
    if mappings.is_empty() {
        return Err(Error::Invalid("portfolio has no sectors".into()));
    }
    for m in mappings {
        m.check_dim(d)?;
    }
    let parts: Vec<(f64, RiskMapping)> = mappings.iter().map(|m| (1.0, m.clone())).collect();
    RiskMapping::portfolio(&parts)
}

/// Allocation from the first-order expansion at the barycenter:
/// `A_j + γ(⟨M, M_j⟩ + Tr(C_j S̃) + Tr(C S̃′_j) + ½ Σ wᵢ Tr Z′ᵢⱼ)`, where
/// `S̃′_j` solves the tangent system with `C_j` in place of `C` and `Z′`
/// differentiates the second-order Sylvester term along `S̃′_j`.
pub fn allocate_perturbative(
    ps: &PriorSet<LocationScatterModel>,
    mappings: &[RiskMapping],
    gamma: f64,
    opts: &LsOptions,
) -> Result<AllocationReport> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma must be non-negative and finite, got {gamma}")));
    }
    let total = total_mapping(mappings, ps.dim())?;
    // one set of draws, shared by every sector
    let st = setup(ps, &total, opts)?;
    let sectors = mappings
        .iter()
        .map(|m| eval_at(&st.m_b, &st.s_b, m, st.draws.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let d = ps.dim();
    let mut whole = sectors[0].clone();
    whole.grad_m.fill(0.0);
    whole.grad_s = DMatrix::zeros(d, d);
    whole.value = 0.0;
    for s in &sectors {
        whole.value += s.value;
        whole.grad_m += &s.grad_m;
        whole.grad_s += &s.grad_s;
    }
    let tangent = Tangent::new(ps, &st.s_b)?;
    let sol = perturbation_solution(&tangent, &whole)?;
    let mut residuals: BTreeMap<String, f64> = sol
        .residuals
        .iter()
        .filter(|(k, _)| k.as_str() != "trace_identity")
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let total_risk = whole.value
        + gamma
            * (0.5 * whole.grad_m.norm_squared()
                + (&whole.grad_s * &sol.s_tilde).trace()
                + 0.5 * tangent.weighted_trace(&sol.z));
    let mut contributions = Vec::with_capacity(sectors.len());
    let mut stationarity = Vec::with_capacity(sectors.len());
    for (j, sec) in sectors.iter().enumerate() {
        let tj = tangent.solve(&sec.grad_s)?;
        let (y_prime, r3) = tangent.first_sylvester(&tj.s_tilde)?;
        let (half_z, r2) = tangent.second_sylvester(&sol.y, &y_prime)?;
        // Z′ solves G Z′ + Z′ G = −2(Y Y′ + Y′ Y), twice what second_sylvester returns
        let z_trace = 2.0 * tangent.weighted_trace(&half_z);
        let station = (&whole.grad_s * &tj.s_tilde).trace() + 0.5 * z_trace;
        let contribution = sec.value
            + gamma * (whole.grad_m.dot(&sec.grad_m) + (&sec.grad_s * &sol.s_tilde).trace() + station);
        for (name, v) in [
            ("tangent_sum", tj.residuals[0]),
            ("tangent_root", tj.residuals[1]),
            ("tangent_transport", tj.residuals[2]),
            ("first_sylvester", r3),
            ("second_sylvester", 2.0 * r2),
        ] {
            residuals.insert(format!("sector{j}_{name}"), v);
        }
        contributions.push(contribution);
        stationarity.push(station);
    }
    let euler_gap = contributions.iter().sum::<f64>() - total_risk;
    Ok(AllocationReport {
        total_risk,
        contributions,
        method: Method::Perturbative,
        gamma,
        euler_gap,
        residuals,
        stationarity,
    })
}

/// Central differences `[ρ(X + εX_j) − ρ(X − εX_j)]/(2ε)` of the
/// fixed-point risk, all evaluations on one set of draws.
pub fn allocate_numeric(
    ps: &PriorSet<LocationScatterModel>,
    mappings: &[RiskMapping],
    gamma: f64,
    epsilon: f64,
    opts: &LsOptions,
) -> Result<AllocationReport> {
    crate::risk1d::check_gamma(gamma)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let total = total_mapping(mappings, ps.dim())?;
    let st = setup(ps, &total, opts)?;
    let risk = |phi: &RiskMapping| fixed_point(ps, phi, gamma, &st, opts).map(|fp| fp.value);
    let total_risk = risk(&total)?;
    let mut contributions = Vec::with_capacity(mappings.len());
    for j in 0..mappings.len() {
        let bumped = |h: f64| -> Result<RiskMapping> {
            let parts: Vec<(f64, RiskMapping)> = mappings
                .iter()
                .enumerate()
                .map(|(k, m)| (if k == j { 1.0 + h } else { 1.0 }, m.clone()))
                .collect();
            RiskMapping::portfolio(&parts)
        };
        let up = risk(&bumped(epsilon)?)?;
        let down = risk(&bumped(-epsilon)?)?;
        contributions.push((up - down) / (2.0 * epsilon));
    }
    let euler_gap = contributions.iter().sum::<f64>() - total_risk;
    Ok(AllocationReport {
        total_risk,
        contributions,
        method: Method::NumericDiff,
        gamma,
        euler_gap,
        residuals: BTreeMap::new(),
        stationarity: Vec::new(),
    })
}
