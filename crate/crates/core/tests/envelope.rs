use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sepsis_core::cohort::{default_variables, generate_synthetic, CohortConfig};
use sepsis_core::numcore::{Tape, Tensor};
use sepsis_core::pipeline::{AblationFlags, Model, ModelConfig, TaskSpec};
use sepsis_core::postproc::{apply, review, Action, Agent, Correction, RangeTable, RuleAgent};
use sepsis_core::Result;

/// Any valid answer: right variables, action only where needed, random
/// alphas.
struct RandomAgent(std::sync::Mutex<ChaCha8Rng>);

impl Agent for RandomAgent {
    fn name(&self) -> &str {
        "random"
    }

    fn review(&self, pred: &[f64], last: &[f64], ranges: &RangeTable) -> Result<Vec<Correction>> {
        let mut rng = self.0.lock().unwrap();
        Ok(ranges
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let deviation = sepsis_core::postproc::deviation(pred[i], ranges.reference(i, last[i]));
                let action = if deviation == 0.0 {
                    Action::None
                } else if rng.random_bool(0.5) {
                    Action::ClampToBound
                } else {
                    Action::ShrinkTowardLast { alpha: rng.random_range(0.0..=1.0) }
                };
                Correction { variable: e.variable.clone(), deviation, action }
            })
            .collect())
    }
}

fn spike(rng: &mut ChaCha8Rng, last: f64, width: f64) -> f64 {
    match rng.random_range(0..10) {
        0 => f64::NAN,
        1 => f64::INFINITY,
        2 => f64::NEG_INFINITY,
        3 => last + rng.random_range(-1e6..1e6),
        4..=6 => last + rng.random_range(-10.0..10.0) * width,
        _ => last + rng.random_range(-0.3..0.3) * width,
    }
}

#[test]
fn every_coordinate_inside_the_envelope() {
    let specs = default_variables();
    let ranges = RangeTable::from_specs(&specs);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let random_agent = RandomAgent(std::sync::Mutex::new(ChaCha8Rng::seed_from_u64(12)));
    let mut violations = 0;
    let mut checked = 0;
    for case in 0..1000 {
        let hours = f64::from(rng.random_range(1..=4));
        let last: Vec<f64> = specs
            .iter()
            .map(|s| rng.random_range(s.plausible_range[0]..=s.plausible_range[1]))
            .collect();
        let pred: Vec<f64> = ranges
            .entries
            .iter()
            .zip(&last)
            .map(|(e, &l)| spike(&mut rng, l, e.hi - e.lo))
            .collect();
        let scale: Vec<f64> = (0..pred.len()).map(|_| rng.random_range(-1.0..3.0)).collect();
        let agent: &dyn Agent = if case % 2 == 0 { &RuleAgent } else { &random_agent };
        let r = review(&pred, &last, &ranges, agent).unwrap();
        let x = apply(&pred, &r.corrections, &scale, &last, &ranges, hours).unwrap();
        for (i, v) in x.iter().enumerate() {
            let (lo, hi) = ranges.envelope(i, last[i], hours);
            checked += 1;
            if !(v.is_finite() && lo <= *v && *v <= hi) {
                violations += 1;
            }
        }
    }
    assert_eq!(checked, 1000 * specs.len());
    assert_eq!(violations, 0);
}

/// The in-graph constraint used during training lands inside the same
/// envelope after denormalization.
#[test]
fn tape_constraint_inside_the_envelope() {
    let cohort = generate_synthetic(&CohortConfig { n_positive: 5, n_negative: 5, ..CohortConfig::default() }, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for h in 1..=4 {
        let task = TaskSpec::new(6, h).unwrap();
        let mut model = Model::new(ModelConfig::default(), AblationFlags::default(), vec![task], cohort.variable_specs.clone(), 0).unwrap();
        for r in &cohort.records {
            let s = model.prepare(r, task).unwrap();
            let n = model.n_vars();
            let scale: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..3.0)).collect();
            let id = model.scale;
            model.store.get_mut(id).value = Tensor::row(scale);
            let o: Vec<f64> = (0..n)
                .map(|i| {
                    let e = &model.ranges.entries[i];
                    let v = spike(&mut rng, s.last[i], e.hi - e.lo);
                    let v = if v.is_finite() { v } else { s.last[i] + 1e6 * (e.hi - e.lo) };
                    s.norm.normalize(i, v)
                })
                .collect();
            let mut tape = Tape::new();
            let ov = tape.constant(Tensor::row(o));
            let (x, _) = model.constrain(&mut tape, ov, &s).unwrap();
            for (i, &v) in tape.value(x).data().iter().enumerate() {
                let raw = s.norm.denormalize(i, v);
                let (lo, hi) = model.ranges.envelope(i, s.last[i], h as f64);
                let tol = 1e-9 * (hi - lo).abs().max(1.0);
                assert!(raw >= lo - tol && raw <= hi + tol, "var {i}: {raw} outside [{lo}, {hi}]");
            }
        }
    }
}
