mod common;

use common::*;
use frechet_risk::barycenter::quantile_barycenter;
use frechet_risk::risk1d::{risk_1d_direct, risk_1d_foc};
use frechet_risk::{
    ls_expectation, ls_expectation_mc, validate_prior_set, AnyPriorSet, LocationScatterModel, PriorSet, RiskMapping,
    WeightVector,
};
use proptest::prelude::*;
use rand::Rng;

fn monotone(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[0] <= p[1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn validation_is_idempotent(seed in any::<u64>(), scale in 0.5f64..1.5) {
        let mut r = rng(seed);
        let ps = random_ls_priors(&mut r, 2, 3);
        let w: Vec<f64> = ps.weights().iter().map(|w| w * scale).collect();
        let broken = AnyPriorSet::LocationScatter(PriorSet::from_parts_unchecked(ps.models().to_vec(), WeightVector::new_unchecked(w)));
        let first = validate_prior_set(&broken);
        let second = validate_prior_set(&broken);
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(first.is_ok(), (scale - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn quantile_outputs_stay_monotone(seed in any::<u64>()) {
        let mut r = rng(seed);
        let ps = random_quantile_priors(&mut r, 801, 5);
        for m in ps.models() {
            prop_assert!(monotone(m.values()));
        }
        prop_assert!(monotone(quantile_barycenter(&ps).unwrap().model.values()));
        let phi = RiskMapping::softplus(vec![r.random_range(-2.0..2.0)]);
        let gamma = r.random_range(0.01..0.5);
        for rep in [risk_1d_foc(&ps, &phi, gamma).unwrap(), risk_1d_direct(&ps, &phi, gamma).unwrap()] {
            prop_assert!(monotone(rep.quantile_maximizer().unwrap().values()));
        }
    }

    #[test]
    fn exact_and_sampled_expectations_agree(seed in any::<u64>(), d in 1usize..=3) {
        let mut r = rng(seed);
        let model = LocationScatterModel::gaussian(random_vector(&mut r, d, 1.0), random_spd(&mut r, d)).unwrap();
        let mappings = if d == 1 {
            vec![
                RiskMapping::affine(r.random_range(-1.0..1.0), r.random_range(-2.0..2.0)),
                RiskMapping::quadratic(0.3, r.random_range(-2.0..2.0), r.random_range(-1.0..1.0)),
            ]
        } else {
            vec![
                RiskMapping::linear_multi(random_vector(&mut r, d, 1.0)),
                RiskMapping::quadratic_multi(random_vector(&mut r, d, 1.0), random_spd(&mut r, d).into_matrix()).unwrap(),
            ]
        };
        for phi in mappings {
            let exact = ls_expectation(&model, &phi, 0, 0).unwrap();
            prop_assert!(exact.exact);
            let mc = ls_expectation_mc(&model, &phi, 20_000, seed).unwrap();
            prop_assert!((exact.value - mc.value).abs() <= 5.0 * mc.stderr + 1e-12, "{} vs {} ± {}", exact.value, mc.value, mc.stderr);
        }
    }
}
