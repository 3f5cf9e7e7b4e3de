use std::collections::BTreeMap;

use aqmm::estimate::{fit, FitControls};
use aqmm::model::{assemble, ClusteredData, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(seed: u64, shift: f64, factor: f64) -> ClusteredData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut y, mut ids, mut x) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..12 {
        let u: f64 = rng.random_range(-1.0..1.0);
        for _ in 0..5 {
            let xi: f64 = rng.random_range(0.0..2.0);
            let e: f64 = rng.random_range(-1.0..1.0);
            y.push(factor * (1.0 + xi + u + e) + shift);
            x.push(xi);
            ids.push(format!("{i}"));
        }
    }
    ClusteredData::new(y, ids, BTreeMap::from([("x".to_string(), x)])).unwrap()
}

fn coefs(seed: u64, shift: f64, factor: f64, tau: f64) -> Vec<f64> {
    let mut spec = ModelSpec::new("y", "cluster");
    spec.linear = vec!["x".into()];
    let design = assemble(&data(seed, shift, factor), &spec).unwrap();
    fit(&design, tau, &FitControls::default(), None).unwrap().beta
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn shifting_the_response_moves_only_the_intercept(seed in 0u64..1000, shift in -50.0..50.0f64, tau in 0.2..0.8f64) {
        let a = coefs(seed, 0.0, 1.0, tau);
        let b = coefs(seed, shift, 1.0, tau);
        prop_assert!((b[0] - a[0] - shift).abs() < 1e-3, "{a:?} {b:?}");
        prop_assert!((b[1] - a[1]).abs() < 1e-3, "{a:?} {b:?}");
    }

    #[test]
    fn scaling_the_response_scales_the_coefficients(seed in 0u64..1000, factor in 0.01..100.0f64, tau in 0.2..0.8f64) {
        let a = coefs(seed, 0.0, 1.0, tau);
        let b = coefs(seed, 0.0, factor, tau);
        for j in 0..2 {
            prop_assert!((b[j] / factor - a[j]).abs() < 1e-3, "{a:?} {b:?}");
        }
    }
}
