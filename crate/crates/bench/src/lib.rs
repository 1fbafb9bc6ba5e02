//! Deterministic inputs shared by the benchmarks.

use frechet_risk::{DensityGrid, GridDensityModel, LocationScatterModel, PriorSet, QuantileGrid, QuantileModel, SpdMatrix};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_spd(rng: &mut impl Rng, d: usize) -> SpdMatrix {
    let q = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let m = &q * q.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5;
    SpdMatrix::new(m).expect("shifted gram matrix is SPD")
}

pub fn ls_priors(d: usize, n: usize, seed: u64) -> PriorSet<LocationScatterModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let models = (0..n)
        .map(|_| {
            let m = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            LocationScatterModel::gaussian(m, random_spd(&mut rng, d)).unwrap()
        })
        .collect();
    PriorSet::uniform(models).unwrap()
}

pub fn quantile_priors(grid_size: usize, n: usize) -> PriorSet<QuantileModel> {
    let grid = QuantileGrid::uniform(grid_size);
    let models = (0..n)
        .map(|i| QuantileModel::normal(grid.clone(), 0.3 * i as f64, 1.0 + 0.2 * i as f64).unwrap())
        .collect();
    PriorSet::uniform(models).unwrap()
}

pub fn density_priors(points: usize, n: usize) -> PriorSet<GridDensityModel> {
    let grid = DensityGrid::line(-15.0, 15.0, points).unwrap();
    let models = (0..n)
        .map(|i| GridDensityModel::gaussian_1d(grid.clone(), 0.4 * i as f64, 1.0 + 0.3 * i as f64).unwrap())
        .collect();
    PriorSet::uniform(models).unwrap()
}
