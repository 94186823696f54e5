//! Backprop vs central finite differences on random model configurations.
//!
//! The FD step is 1e-5 at f64; comparisons use a two-sided relative error
//! with a 1e-5 absolute floor so entries at the FD noise level are judged
//! by absolute difference. Random checks run on the smooth activation
//! (finite differences are not a valid oracle across ReLU kinks); ReLU gets
//! a hand-built fixture whose pre-activations keep a safe margin from zero.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fiva_core::nn::{Activation, BackboneSpec, BatchTensor, HeadSpec, Model, ModelSpec, Provenance};
use fiva_core::oracle::{fd_gradient, max_relative_error};
use fiva_core::ParamVector;

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;

fn random_batch(spec: &ModelSpec, head: usize, n: usize, rng: &mut ChaCha8Rng) -> BatchTensor {
    let (h, w) = spec.grid;
    let c_head = spec.heads[head].labels.len();
    BatchTensor {
        inputs: (0..n * h * w).map(|_| rng.random::<f64>()).collect(),
        targets: (0..n * h * w)
            .map(|_| rng.random_range(0..c_head as u32) as u8)
            .collect(),
        n,
        h,
        w,
        provenance: Provenance {
            client_id: 0,
            holdout: false,
        },
    }
}

fn check_config(model: &Model, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = model.init(seed);
    let head = (seed as usize) % model.num_heads();
    let batch = random_batch(model.spec(), head, 2, &mut rng);
    let (_, analytic) = model.backward(&theta, &batch, head).unwrap();
    let numeric = fd_gradient(model, &theta, &batch, head, FD_STEP).unwrap();
    max_relative_error(&analytic, &numeric, FD_FLOOR)
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let spec = ModelSpec {
        grid: (2, 3),
        backbone: BackboneSpec::Mlp {
            hidden: vec![6, 4],
        },
        heads: vec![HeadSpec::new(vec![0, 1]), HeadSpec::new(vec![0, 1, 2])],
        activation: Activation::Silu,
        dropout_rate: 0.0,
        num_global_labels: 3,
    };
    let model = Model::new(spec).unwrap();
    assert!(model.param_len() <= 1000, "{} params", model.param_len());
    for seed in 0..5 {
        let err = check_config(&model, seed);
        assert!(err < MAX_REL_ERR, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let spec = ModelSpec {
        grid: (8, 8),
        backbone: BackboneSpec::Conv { channels: 2 },
        heads: vec![HeadSpec::new(vec![0, 1, 2]), HeadSpec::new(vec![0, 3])],
        activation: Activation::Silu,
        dropout_rate: 0.0,
        num_global_labels: 4,
    };
    let model = Model::new(spec).unwrap();
    assert!(model.param_len() <= 100_000);
    for seed in 0..3 {
        let err = check_config(&model, seed);
        assert!(err < MAX_REL_ERR, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn relu_gradients_match_at_a_margin_safe_point() {
    // Hand-picked weights and inputs keep every pre-activation at magnitude
    // >= 0.05, far beyond the FD step, so the kink never interferes.
    let spec = ModelSpec {
        grid: (1, 2),
        backbone: BackboneSpec::Mlp { hidden: vec![2] },
        heads: vec![HeadSpec::new(vec![0, 1])],
        activation: Activation::Relu,
        dropout_rate: 0.0,
        num_global_labels: 2,
    };
    let model = Model::new(spec).unwrap();
    let theta = ParamVector::from_vec(vec![
        0.8, -0.3, 0.4, 0.6, // W1
        0.2, -0.1, // b1
        0.5, -0.7, 0.3, 0.9, 0.6, -0.4, 0.2, 0.8, // head weights 4x2
        0.1, -0.2, 0.05, 0.15, // head bias
    ]);
    let batch = BatchTensor {
        inputs: vec![0.9, 0.4],
        targets: vec![1, 0],
        n: 1,
        h: 1,
        w: 2,
        provenance: Provenance {
            client_id: 0,
            holdout: false,
        },
    };
    let (_, analytic) = model.backward(&theta, &batch, 0).unwrap();
    let numeric = fd_gradient(&model, &theta, &batch, 0, FD_STEP).unwrap();
    let err = max_relative_error(&analytic, &numeric, FD_FLOOR);
    assert!(err < MAX_REL_ERR, "max rel err {err}");
}
