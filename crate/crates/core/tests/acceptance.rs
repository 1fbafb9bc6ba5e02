//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line; run with
//! `cargo test --test acceptance -- --nocapture --test-threads 1` to read them in order.

mod common;

use std::time::{Duration, Instant};

use common::*;
use frechet_risk::allocation::{allocate_numeric, allocate_perturbative, DEFAULT_EPSILON};
use frechet_risk::barycenter::{kl_barycenter, ls_wasserstein_barycenter};
use frechet_risk::entropic::{entropic_risk, entropic_risk_direct};
use frechet_risk::premia::{run_robustness_study, SimulationConfig, StudyMethod, StudyTable};
use frechet_risk::risk1d::{risk_1d_affine, risk_1d_direct, risk_1d_foc, risk_1d_perturbative, risk_1d_quadratic};
use frechet_risk::risk_ls::{risk_ls_fixed_point, risk_ls_linear, risk_ls_perturbative, LsOptions};
use frechet_risk::spd::{geometric_mean, solve_sylvester_spd, sylvester_residual};
use frechet_risk::{
    DensityGrid, Error, GridDensityModel, PriorSet, QuantileModel, RiskMapping, RiskReport,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn report(n: &str, ok: bool, detail: String) {
    println!("{} criterion {n}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// `Σ wᵢ gᵢ` on the grid, computed here rather than by the library.
fn mixed_quantiles(ps: &PriorSet<QuantileModel>) -> Vec<f64> {
    let mut g = vec![0.0; ps.models()[0].len()];
    for (w, m) in ps.iter() {
        for (x, v) in g.iter_mut().zip(m.values()) {
            *x += w * v;
        }
    }
    g
}

/// Quadrature of `j ↦ f(j)` with the grid's own weights.
fn grid_mean(ps: &PriorSet<QuantileModel>, f: impl Fn(usize) -> f64) -> f64 {
    ps.models()[0].grid().weights().iter().enumerate().map(|(j, w)| w * f(j)).sum()
}

#[test]
fn criterion_01_affine_closed_form() {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let ps = random_quantile_priors(&mut r, 2001, 10);
        let (alpha, b, gamma) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(1e-3..0.5));
        let g_b = mixed_quantiles(&ps);
        let mean_b = grid_mean(&ps, |j| g_b[j]);
        let oracle = alpha + b * mean_b + 0.5 * gamma * b * b;
        let direct = risk_1d_direct(&ps, &RiskMapping::affine(alpha, b), gamma).unwrap().value;
        worst = worst.max(rel(direct, oracle));
    }
    let elapsed = start.elapsed();
    report(
        "1",
        worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!("affine 1-D direct vs closed form, worst relative error {worst:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_quadratic_closed_form() {
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let ps = random_quantile_priors(&mut r, 2001, 6);
        let gamma = r.random_range(0.01..0.5);
        let lambda = r.random_range(0.1..1.5);
        let (alpha, b, c) = (r.random_range(-1.0..1.0), r.random_range(-2.0..2.0), (1.0 - lambda) / gamma);
        // maximizer (g_B + γb)/λ of α + bg + ½cg² − (g − g_B)²/(2γ), pointwise
        let g_b = mixed_quantiles(&ps);
        let oracle = grid_mean(&ps, |j| {
            let g = (g_b[j] + gamma * b) / lambda;
            alpha + b * g + 0.5 * c * g * g - (g - g_b[j]).powi(2) / (2.0 * gamma)
        });
        let foc = risk_1d_foc(&ps, &RiskMapping::quadratic(alpha, b, c), gamma).unwrap().value;
        worst = worst.max((foc - oracle).abs());
    }
    let ps = random_quantile_priors(&mut r, 2001, 4);
    let gamma = 0.2;
    let mut rejected = 0;
    for c in [1.0 / gamma, 1.0 / gamma + 1.0, 20.0 / gamma] {
        let phi = RiskMapping::quadratic(0.0, 1.0, c);
        let closed = risk_1d_quadratic(&ps, 0.0, 1.0, c, gamma);
        let foc = risk_1d_foc(&ps, &phi, gamma);
        rejected += matches!(closed, Err(Error::Unbounded { .. })) as usize;
        rejected += foc.is_err() as usize;
    }
    let elapsed = start.elapsed();
    report(
        "2",
        worst <= 1e-8 && rejected == 6 && elapsed < Duration::from_secs(10),
        format!("quadratic 1-D FOC worst error {worst:.2e} for lambda >= 0.1, {rejected}/6 lambda <= 0 cases rejected, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_03_barycenter_fixed_point() {
    let start = Instant::now();
    let mut r = rng(303);
    let mut worst: f64 = 0.0;
    for d in [1, 2, 5] {
        for n in [2, 5] {
            let ps = random_ls_priors(&mut r, d, n);
            let b = ls_wasserstein_barycenter(&ps, 1e-12, 1000).unwrap();
            let s = b.model.scatter().as_matrix();
            // residual with an independent square root
            let root = |m: &DMatrix<f64>| {
                let e = m.clone().symmetric_eigen();
                &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|x| x.max(0.0).sqrt())) * e.eigenvectors.transpose()
            };
            let rs = root(s);
            let t: DMatrix<f64> = ps.iter().map(|(w, m)| root(&(&rs * m.scatter().as_matrix() * &rs)) * w).sum();
            worst = worst.max((s - t).norm() / s.norm());
        }
    }
    let mut scalar: f64 = 0.0;
    for n in [2, 5] {
        let ps = random_ls_priors(&mut r, 1, n);
        let b = ls_wasserstein_barycenter(&ps, 1e-12, 1000).unwrap();
        let expect = ps.iter().map(|(w, m)| w * m.scatter().as_matrix()[(0, 0)].sqrt()).sum::<f64>().powi(2);
        scalar = scalar.max((b.model.scatter().as_matrix()[(0, 0)] - expect).abs());
    }
    let elapsed = start.elapsed();
    report(
        "3",
        worst <= 1e-10 && scalar <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("barycenter equation residual {worst:.2e} x ||S_B||, 1-D closed form gap {scalar:.2e}, {elapsed:.2?}"),
    );
}

#[test]
fn criterion_04_matrix_kernels() {
    let start = Instant::now();
    let mut r = rng(404);
    let (mut sylvester, mut riccati, mut symmetry): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for k in 0..100 {
        let d = 1 + k % 5;
        let g = random_spd(&mut r, d);
        let c = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let y = solve_sylvester_spd(&g, &c).unwrap();
        let brute = sylvester_brute_force(g.as_matrix(), &c);
        sylvester = sylvester.max((&y - brute).norm()).max(sylvester_residual(g.as_matrix(), &y, &c));
        let a = random_spd(&mut r, d);
        let ab = geometric_mean(&a, &g).unwrap();
        let x = ab.as_matrix();
        riccati = riccati.max((x * a.inverse().as_matrix() * x - g.as_matrix()).norm() / g.as_matrix().norm());
        symmetry = symmetry.max((x - geometric_mean(&g, &a).unwrap().as_matrix()).norm());
    }
    let worst = sylvester.max(riccati).max(symmetry);
    let elapsed = start.elapsed();
    report(
        "4",
        worst <= 1e-10 && elapsed < Duration::from_secs(5),
        format!(
            "Sylvester vs Kronecker {sylvester:.2e}, geometric mean Riccati {riccati:.2e}, symmetry {symmetry:.2e} over 100 instances, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_05_linear_exactness() {
    let mut r = rng(505);
    let opts = LsOptions::default();
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let d = 1 + k % 5;
        let ps = random_ls_priors(&mut r, d, 2 + k % 3);
        let a = random_vector(&mut r, d, 1.5);
        let gamma = r.random_range(0.01..0.5);
        let m_b: DVector<f64> = ps.iter().map(|(w, m)| m.location() * w).sum();
        let oracle = a.dot(&m_b) + 0.5 * gamma * a.norm_squared();
        let phi = RiskMapping::linear_multi(a);
        for v in [
            risk_ls_fixed_point(&ps, &phi, gamma, &opts).unwrap().value,
            risk_ls_perturbative(&ps, &phi, gamma, &opts).unwrap().value,
        ] {
            worst = worst.max((v - oracle).abs());
        }
    }
    report("5", worst <= 1e-9, format!("linear mappings, fixed point and perturbative worst error {worst:.2e}"));
}

#[test]
fn criterion_06_perturbative_order() {
    let mut r = rng(606);
    let opts = LsOptions::default();
    let mut ratios = Vec::new();
    for k in 0..10 {
        let d = 1 + k % 3;
        let ps = random_ls_priors(&mut r, d, 3);
        let q = random_spd(&mut r, d).into_matrix() * r.random_range(0.2..0.6);
        let phi = RiskMapping::quadratic_multi(random_vector(&mut r, d, 1.0), q).unwrap();
        let gap = |g: f64| {
            let exact = risk_ls_fixed_point(&ps, &phi, g, &opts).unwrap().value;
            let approx = risk_ls_perturbative(&ps, &phi, g, &opts).unwrap().value;
            (exact - approx).abs()
        };
        ratios.push(gap(0.02) / gap(0.01));
    }
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    report(
        "6",
        ratios.iter().all(|x| (3.0..=5.0).contains(x)),
        format!("error ratio between gamma = 0.02 and 0.01 in [{lo:.3}, {hi:.3}] over 10 quadratic instances"),
    );
}

type Check = (String, bool);

/// γ-monotonicity, barycenter lower bound and cash invariance for one solver.
fn axioms(name: &str, solve: impl Fn(&RiskMapping, f64) -> RiskReport, phi: &RiskMapping, gammas: &[f64], kappa: f64) -> Check {
    let reports: Vec<RiskReport> = gammas.iter().map(|&g| solve(phi, g)).collect();
    let monotone = reports.windows(2).all(|p| p[1].value >= p[0].value - 1e-9);
    let bounded = reports
        .iter()
        .all(|r| r.value >= r.diagnostics.barycenter_expectation.expect("solvers report E_B[phi]") - 1e-9);
    let g = gammas[gammas.len() / 2];
    let cash = solve(&phi.shift_cash(kappa), g).value;
    let base = solve(phi, g).value;
    let shift = (base - kappa - cash).abs() <= 1e-9 * (1.0 + base.abs());
    (
        format!("{name}[monotone={monotone} bound={bounded} cash={shift}]"),
        monotone && bounded && shift,
    )
}

#[test]
fn criterion_07_risk_measure_axioms() {
    let mut r = rng(707);
    let gammas = [0.01, 0.03, 0.1, 0.2, 0.4];
    let kappa = 1.7;
    let mut checks: Vec<Check> = Vec::new();

    let qs = random_quantile_priors(&mut r, 2001, 5);
    let quad = RiskMapping::quadratic(0.3, 0.8, 0.9);
    let soft = RiskMapping::softplus(vec![1.2]);
    checks.push(axioms(
        "1d-closed",
        |phi, g| match *phi {
            RiskMapping::Quadratic { alpha, b, c } => risk_1d_quadratic(&qs, alpha, b, c, g).unwrap(),
            RiskMapping::Affine { alpha, b } => risk_1d_affine(&qs, alpha, b, g).unwrap(),
            _ => unreachable!(),
        },
        &quad,
        &gammas,
        kappa,
    ));
    for phi in [&quad, &soft] {
        checks.push(axioms(&format!("1d-foc/{}", phi.tag()), |p, g| risk_1d_foc(&qs, p, g).unwrap(), phi, &gammas, kappa));
        checks.push(axioms(&format!("1d-direct/{}", phi.tag()), |p, g| risk_1d_direct(&qs, p, g).unwrap(), phi, &gammas, kappa));
        checks.push(axioms(
            &format!("1d-perturbative/{}", phi.tag()),
            |p, g| risk_1d_perturbative(&qs, p, g).unwrap(),
            phi,
            &gammas,
            kappa,
        ));
    }

    // location-scatter: a scalar model keeps affine/quadratic tags, whose cash shift stays exact
    let ls1 = random_ls_priors(&mut r, 1, 3);
    let opts = LsOptions::default();
    checks.push(axioms("ls-fixed-point/quadratic", |p, g| risk_ls_fixed_point(&ls1, p, g, &opts).unwrap(), &quad, &gammas, kappa));
    checks.push(axioms("ls-perturbative/quadratic", |p, g| risk_ls_perturbative(&ls1, p, g, &opts).unwrap(), &quad, &gammas, kappa));
    let affine = RiskMapping::affine(0.5, -1.1);
    checks.push(axioms("ls-closed/affine", |p, g| risk_ls_linear(&ls1, p, g).unwrap(), &affine, &gammas, kappa));
    let ls3 = random_ls_priors(&mut r, 3, 3);
    let sampled = RiskMapping::softplus(vec![0.4, -0.3, 0.8]);
    checks.push(axioms("ls-fixed-point/sampled", |p, g| risk_ls_fixed_point(&ls3, p, g, &opts).unwrap(), &sampled, &gammas, kappa));

    let grid = DensityGrid::line(-14.0, 16.0, 2401).unwrap();
    let dens = PriorSet::uniform(vec![
        GridDensityModel::gaussian_1d(grid.clone(), 0.0, 1.0).unwrap(),
        GridDensityModel::gaussian_1d(grid.clone(), 1.0, 2.0).unwrap(),
        GridDensityModel::gaussian_1d(grid, -0.5, 0.7).unwrap(),
    ])
    .unwrap();
    checks.push(axioms("entropic", |p, g| entropic_risk(&dens, p, g).unwrap(), &soft, &gammas, kappa));
    checks.push(axioms("entropic-direct", |p, g| entropic_risk_direct(&dens, p, g, 1e-13).unwrap(), &soft, &gammas, kappa));

    let ok = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    report(
        "7",
        ok,
        if ok {
            format!("gamma-monotonicity, barycenter bound and cash invariance hold for {} solver/mapping pairs", checks.len())
        } else {
            format!("violations: {}", failed.join(" "))
        },
    );
}

#[test]
fn criterion_08_entropic() {
    let (mu, v) = (0.7f64, 1.5f64);
    let grid = DensityGrid::line(mu - 14.0 * v.sqrt(), mu + 14.0 * v.sqrt(), 4001).unwrap();
    let single = PriorSet::uniform(vec![GridDensityModel::gaussian_1d(grid.clone(), mu, v).unwrap()]).unwrap();
    let mut mgf: f64 = 0.0;
    for gamma in [0.05, 0.2, 0.5, 1.0] {
        let value = entropic_risk(&single, &RiskMapping::affine(0.0, 1.0), gamma).unwrap().value;
        mgf = mgf.max((value - (mu + gamma * v / 2.0)).abs());
    }
    let ps = PriorSet::new(
        vec![
            GridDensityModel::gaussian_1d(grid.clone(), 0.0, 1.0).unwrap(),
            GridDensityModel::gaussian_1d(grid.clone(), 1.5, 2.0).unwrap(),
            GridDensityModel::gaussian_1d(grid, -0.5, 0.8).unwrap(),
        ],
        vec![0.2, 0.5, 0.3],
    )
    .unwrap();
    let mut direct: f64 = 0.0;
    for (phi, gamma) in [(RiskMapping::softplus(vec![1.0]), 0.3), (RiskMapping::quadratic(0.0, 0.5, 0.2), 0.5)] {
        let a = entropic_risk(&ps, &phi, gamma).unwrap().value;
        let b = entropic_risk_direct(&ps, &phi, gamma, 1e-13).unwrap().value;
        direct = direct.max((a - b).abs());
    }
    let bary = kl_barycenter(&ps).unwrap();
    let identity = (bary.frechet_variance - bary.log_c0.unwrap()).abs();
    report(
        "8",
        mgf <= 1e-4 && direct <= 1e-5 && identity <= 1e-8,
        format!("Gaussian MGF gap {mgf:.2e}, closed vs direct {direct:.2e}, V = log C0 gap {identity:.2e}"),
    );
}

#[test]
fn criterion_09_allocation() {
    let mut r = rng(909);
    let opts = LsOptions::default();
    let mut quad_ok = true;
    let mut worst_quad: f64 = 0.0;
    for k in 0..8 {
        let d = 1 + k % 3;
        let ps = random_ls_priors(&mut r, d, 3);
        let sectors: Vec<RiskMapping> = (0..(1 + k % 4))
            .map(|_| {
                let q = random_spd(&mut r, d).into_matrix() * r.random_range(-0.3..0.3);
                RiskMapping::quadratic_multi(random_vector(&mut r, d, 0.5), q).unwrap()
            })
            .collect();
        let gamma = [0.001, 0.005, 0.01, 0.02][k % 4];
        let pert = allocate_perturbative(&ps, &sectors, gamma, &opts).unwrap();
        let num = allocate_numeric(&ps, &sectors, gamma, DEFAULT_EPSILON, &opts).unwrap();
        for (p, n) in pert.contributions.iter().zip(&num.contributions) {
            let gap = (p - n).abs();
            quad_ok &= gap <= 1e-5f64.max(10.0 * gamma * gamma);
            worst_quad = worst_quad.max(gap);
        }
    }
    let mut worst_lin: f64 = 0.0;
    for k in 0..5 {
        let d = 1 + k % 3;
        let ps = random_ls_priors(&mut r, d, 2);
        let a: Vec<DVector<f64>> = (0..3).map(|_| random_vector(&mut r, d, 1.0)).collect();
        let sectors: Vec<RiskMapping> = a.iter().cloned().map(RiskMapping::linear_multi).collect();
        let gamma = r.random_range(0.01..0.3);
        let m_b: DVector<f64> = ps.iter().map(|(w, m)| m.location() * w).sum();
        let total: DVector<f64> = a.iter().sum();
        for rep in [
            allocate_perturbative(&ps, &sectors, gamma, &opts).unwrap(),
            allocate_numeric(&ps, &sectors, gamma, DEFAULT_EPSILON, &opts).unwrap(),
        ] {
            for (aj, c) in a.iter().zip(&rep.contributions) {
                worst_lin = worst_lin.max((c - (aj.dot(&m_b) + gamma * total.dot(aj))).abs());
            }
        }
    }
    report(
        "9",
        quad_ok && worst_lin <= 1e-6,
        format!("quadratic sectors perturbative vs numeric worst gap {worst_quad:.2e} (within max(1e-5, 10 gamma^2): {quad_ok}), linear closed form {worst_lin:.2e}"),
    );
}

fn wasserstein_err(t: &StudyTable, h: &str, n: usize, g: f64) -> f64 {
    t.row(h, n, g, StudyMethod::Wasserstein).unwrap().mean_rel_err
}

#[test]
fn criterion_10_study_trends() {
    let cfg = SimulationConfig {
        replications: 100,
        seed: 20,
        ..Default::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let table = pool.install(|| run_robustness_study(&cfg)).unwrap();
    let elapsed = start.elapsed();

    let small: Vec<f64> = cfg.gamma_grid.iter().copied().filter(|g| *g <= 0.01).collect();
    let mut a_fail = Vec::new();
    for h in &cfg.homogeneity {
        for &n in &cfg.n_experts {
            for &g in &small {
                let w = wasserstein_err(&table, &h.label, n, g);
                let avg = table.row(&h.label, n, g, StudyMethod::Average).unwrap().mean_rel_err;
                let below = w < avg;
                if !below {
                    a_fail.push(format!("{}/n={n}/gamma={g}: {w:.4} vs {avg:.4}", h.label));
                }
            }
        }
    }
    // the grid runs from large to small γ, so errors must not increase down a column
    let mut b_fail = Vec::new();
    for h in &cfg.homogeneity {
        for &n in &cfg.n_experts {
            let col: Vec<f64> = cfg.gamma_grid.iter().map(|&g| wasserstein_err(&table, &h.label, n, g)).collect();
            let inversions = col.windows(2).filter(|p| p[1] > p[0]).count();
            if inversions > 1 {
                b_fail.push(format!("{}/n={n}: {inversions} inversions", h.label));
            }
        }
    }
    let mut c_fail = Vec::new();
    let (n_lo, n_hi) = (cfg.n_experts[0], *cfg.n_experts.last().unwrap());
    for h in &cfg.homogeneity {
        let sd = |n| table.row(&h.label, n, 0.0, StudyMethod::Wasserstein).unwrap().sd_rel_err;
        let shrinks = sd(n_hi) < sd(n_lo);
        if !shrinks {
            c_fail.push(format!("{}: {:.4} -> {:.4}", h.label, sd(n_lo), sd(n_hi)));
        }
    }
    let fast = elapsed < Duration::from_secs(300);
    let summary = |f: &Vec<String>| if f.is_empty() { "ok".to_string() } else { f.join(", ") };
    report(
        "10",
        a_fail.is_empty() && b_fail.is_empty() && c_fail.is_empty() && fast,
        format!(
            "(a) wasserstein below average at gamma <= 0.01: {} | (b) monotone in gamma: {} | (c) sd shrinks with n: {} | {elapsed:.1?} single-threaded",
            summary(&a_fail),
            summary(&b_fail),
            summary(&c_fail)
        ),
    );
}
