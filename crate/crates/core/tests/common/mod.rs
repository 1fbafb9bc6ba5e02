#![allow(dead_code)]

use frechet_risk::{CentralLaw, LocationScatterModel, PriorSet, QuantileGrid, QuantileModel, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `QQᵀ/d + λ I` with eigenvalues kept in a moderate range.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> SpdMatrix {
    let q = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let shift = rng.random_range(0.2..1.0);
    SpdMatrix::new(&q * q.transpose() / d as f64 + DMatrix::identity(d, d) * shift).unwrap()
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-scale..scale))
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // exact simplex: put the rounding error on the last weight
    let head: f64 = w[..n - 1].iter().sum();
    w[n - 1] = 1.0 - head;
    w
}

pub fn random_ls_priors(rng: &mut ChaCha8Rng, d: usize, n: usize) -> PriorSet<LocationScatterModel> {
    let models = (0..n)
        .map(|_| LocationScatterModel::gaussian(random_vector(rng, d, 1.0), random_spd(rng, d)).unwrap())
        .collect();
    let w = random_weights(rng, n);
    PriorSet::new(models, w).unwrap()
}

/// 2 to `max_n` Gaussian or Student-t quantile models on one grid.
pub fn random_quantile_priors(rng: &mut ChaCha8Rng, grid_size: usize, max_n: usize) -> PriorSet<QuantileModel> {
    let grid = QuantileGrid::uniform(grid_size);
    let n = rng.random_range(2..=max_n);
    let models = (0..n)
        .map(|_| {
            let mean = rng.random_range(-1.0..1.0);
            let sd = rng.random_range(0.5..2.0);
            if rng.random_bool(0.5) {
                QuantileModel::normal(grid.clone(), mean, sd).unwrap()
            } else {
                QuantileModel::student_t(grid.clone(), mean, sd, rng.random_range(5.0..12.0)).unwrap()
            }
        })
        .collect();
    let w = random_weights(rng, n);
    PriorSet::new(models, w).unwrap()
}

/// The quantile models induced by one-dimensional location-scatter priors.
pub fn induced_quantiles(ps: &PriorSet<LocationScatterModel>, grid_size: usize) -> PriorSet<QuantileModel> {
    let grid = QuantileGrid::uniform(grid_size);
    let models = ps
        .models()
        .iter()
        .map(|m| {
            let law: CentralLaw = m.central();
            QuantileModel::location_scatter(grid.clone(), m.location()[0], m.scatter().as_matrix()[(0, 0)], &law).unwrap()
        })
        .collect();
    PriorSet::new(models, ps.weights().to_vec()).unwrap()
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    DMatrix::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

/// Solves `Y G + G Y = C` through the `d² × d²` system
/// `(I ⊗ G + Gᵀ ⊗ I) vec(Y) = vec(C)`.
pub fn sylvester_brute_force(g: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let d = g.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let k = kron(&id, g) + kron(&g.transpose(), &id);
    let vec_c = DVector::from_column_slice(c.as_slice());
    let y = k.lu().solve(&vec_c).expect("Sylvester operator of an SPD matrix is invertible");
    DMatrix::from_column_slice(d, d, y.as_slice())
}
