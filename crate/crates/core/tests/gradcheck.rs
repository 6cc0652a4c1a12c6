use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepsis_core::cohort::{generate_synthetic, CohortConfig};
use sepsis_core::numcore::{
    finite_diff_check, Activation, GradCheckConfig, Mlp2, MultiHeadAttention, ParamStore, Tape,
    Tensor,
};
use sepsis_core::pipeline::{AblationFlags, Model, ModelConfig, TaskSpec};

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn check(name: &str, report: sepsis_core::numcore::GradCheckReport) -> f64 {
    assert!(!report.entries.is_empty(), "{name}: no gradients probed");
    assert!(report.passed, "{name}: max relative error {:.3e}", report.max_rel_error);
    report.max_rel_error
}

#[test]
fn mlp_graphs() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, i, h, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(2..8), rng.random_range(1..4));
        let act = [Activation::Relu, Activation::Tanh, Activation::Identity][seed as usize % 3];
        let mut store = ParamStore::new();
        let mlp = Mlp2::new(&mut store, "m", i, h, o, act, true, &mut rng).unwrap();
        let x = random_tensor(&mut rng, n, i);
        let target: Vec<f64> = (0..n * o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = finite_diff_check(
            |tape, store| {
                let xv = tape.constant(x.clone());
                let y = mlp.forward(tape, store, xv)?;
                tape.mse(y, &target)
            },
            &mut store,
            GradCheckConfig::default(),
        )
        .unwrap();
        check(&format!("mlp seed {seed}"), report);
    }
}

#[test]
fn attention_graphs() {
    for seed in 0..8u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let heads = 1 + seed as usize % 3;
        let width = heads * rng.random_range(1..4);
        let (nq, nk, dq, dk) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", dq, dk, width, heads, true, &mut rng).unwrap();
        let xq = random_tensor(&mut rng, nq, dq);
        let xk = random_tensor(&mut rng, nk, dk);
        let labels: Vec<f64> = (0..nq * width).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let report = finite_diff_check(
            |tape, store| {
                let q = tape.constant(xq.clone());
                let k = tape.constant(xk.clone());
                let y = mha.forward(tape, store, q, k)?;
                let y = tape.layer_norm_rows(y, 1e-5);
                tape.bce_with_logits(y, &labels)
            },
            &mut store,
            GradCheckConfig::default(),
        )
        .unwrap();
        check(&format!("attention seed {seed}"), report);
    }
}

fn tiny_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.layers = 1;
    cfg.backbone.width = 8;
    cfg.backbone.heads = 2;
    cfg.backbone.vocab_size = 400;
    cfg.backbone.context = 96;
    cfg.reprogram.prototypes = 4;
    cfg.prompt_tokens = 24;
    cfg.classifier_hidden = 4;
    cfg
}

/// Regression, reprogramming, prompt prefix and the in-graph constraint.
#[test]
fn stage1_graphs() {
    let cohort = generate_synthetic(
        &CohortConfig {
            n_positive: 3,
            n_negative: 3,
            ..CohortConfig::default()
        },
        5,
    )
    .unwrap();
    let task = TaskSpec::new(4, 1).unwrap();
    for (i, seed) in (0..6u64).enumerate() {
        let flags = if i % 2 == 0 {
            AblationFlags::default()
        } else {
            "no-summary".parse().unwrap()
        };
        let mut model = Model::new(tiny_config(), flags, vec![task], cohort.variable_specs.clone(), seed).unwrap();
        let sample = model.prepare(&cohort.records[i], task).unwrap();
        model.store.set_trainable("", false);
        for prefix in ["reprog.", "head.", "postproc.s", "backbone.0."] {
            model.store.set_trainable(prefix, true);
        }
        let mut store = model.store.clone();
        let model = RefCell::new(model);
        // Smaller step: ReLU kinks in the backbone sit within 1e-5 of some probes.
        let cfg = GradCheckConfig {
            max_entries_per_param: 4,
            step: 1e-6,
            ..GradCheckConfig::default()
        };
        let report = finite_diff_check(
            |tape: &mut Tape, store: &ParamStore| {
                let mut m = model.borrow_mut();
                m.store.load_values(store)?;
                let protos = m.prototypes(tape)?;
                m.stage1_loss(tape, &sample, protos)
            },
            &mut store,
            cfg,
        )
        .unwrap();
        assert!(report.entries.iter().any(|e| e.param.starts_with("reprog.")));
        check(&format!("stage 1 seed {seed}"), report);
    }
}
