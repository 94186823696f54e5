//! Online statistics vs an independent two-pass computation.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fiva_core::oracle::{two_pass_mean_m2, two_pass_variance};
use fiva_core::welford::WelfordAccumulator;
use fiva_core::ParamVector;

fn run_stream(values: &[f64]) -> WelfordAccumulator {
    let mut acc = WelfordAccumulator::new(1);
    for &v in values {
        acc.update(&ParamVector::from_vec(vec![v])).unwrap();
    }
    acc
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn ten_thousand_random_streams_match_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    for _ in 0..10_000 {
        let len = rng.random_range(2..=500usize);
        let values: Vec<f64> = (0..len).map(|_| rng.random_range(-10.0..10.0)).collect();
        let acc = run_stream(&values);
        let (mean, _) = two_pass_mean_m2(&values);
        let var = two_pass_variance(&values);
        let online_var = acc.finalize_variance().unwrap()[0];
        assert!(
            rel_err(acc.mean()[0], mean) < 1e-10,
            "mean {} vs {}",
            acc.mean()[0],
            mean
        );
        assert!(
            rel_err(online_var, var) < 1e-10,
            "variance {online_var} vs {var}"
        );
    }
}

#[test]
fn vector_streams_match_componentwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dim = 16;
    for _ in 0..50 {
        let len = rng.random_range(2..=80usize);
        let stream: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let mut acc = WelfordAccumulator::new(dim);
        for v in &stream {
            acc.update(&ParamVector::from_vec(v.clone())).unwrap();
        }
        let var = acc.finalize_variance().unwrap();
        for j in 0..dim {
            let column: Vec<f64> = stream.iter().map(|v| v[j]).collect();
            assert!(rel_err(var[j], two_pass_variance(&column)) < 1e-10);
        }
    }
}

proptest! {
    #[test]
    fn permutation_invariance(
        values in prop::collection::vec(-10.0..10.0f64, 2..60),
        seed in 0u64..1000,
    ) {
        let mut shuffled = values.clone();
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffled.shuffle(&mut rng);

        let a = run_stream(&values);
        let b = run_stream(&shuffled);
        prop_assert!(rel_err(a.mean()[0], b.mean()[0]) < 1e-10);
        let va = a.finalize_variance().unwrap()[0];
        let vb = b.finalize_variance().unwrap()[0];
        prop_assert!(rel_err(va, vb) < 1e-10);
    }

    #[test]
    fn m2_stays_non_negative(values in prop::collection::vec(-100.0..100.0f64, 1..50)) {
        let acc = run_stream(&values);
        prop_assert!(acc.m2()[0] >= 0.0);
    }
}
