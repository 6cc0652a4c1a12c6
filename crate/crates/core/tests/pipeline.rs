use sepsis_core::cohort::{generate_synthetic, index_of, split, Cohort, CohortConfig, Label, Split};
use sepsis_core::evalx::{mean_saliency, mse_table};
use sepsis_core::pipeline::{
    evaluate, train_task, AblationFlags, Model, ModelConfig, StageConfig, TaskSpec, TrainConfig,
};

fn cohort(cfg: CohortConfig, seed: u64) -> Cohort {
    split(generate_synthetic(&cfg, seed).unwrap(), [0.6, 0.2, 0.2], seed).unwrap()
}

fn small_cohort() -> Cohort {
    cohort(CohortConfig { n_positive: 40, n_negative: 40, ..CohortConfig::default() }, 4)
}

fn quick() -> TrainConfig {
    let mut t = TrainConfig::default();
    t.stage1 = StageConfig { epochs: 2, ..t.stage1 };
    t.stage2 = StageConfig { epochs: 60, patience: 20, ..t.stage2 };
    t
}

#[test]
fn checkpoint_roundtrip_reproduces_scores() {
    let c = small_cohort();
    let task = TaskSpec::new(6, 1).unwrap();
    let model = train_task(&c, &[task], &ModelConfig::default(), &quick(), AblationFlags::default(), 3).unwrap();
    assert!(model.meta.log.classifier_trained());
    let before = evaluate(&model, &c, Split::Test, task, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = Model::load(dir.path()).unwrap();
    let after = evaluate(&loaded, &c, Split::Test, task, 1).unwrap();
    assert_eq!(before.scores, after.scores);
    assert_eq!(before.auc, after.auc);
    let a = mse_table(&model, &c, &[task], None, 1).unwrap();
    let b = mse_table(&loaded, &c, &[task], None, 1).unwrap();
    assert_eq!(a.to_csv(false), b.to_csv(false));
}

#[test]
fn evaluation_is_thread_count_invariant() {
    let c = small_cohort();
    let task = TaskSpec::new(8, 2).unwrap();
    let model = Model::new(ModelConfig::default(), AblationFlags::default(), vec![task], c.variable_specs.clone(), 1).unwrap();
    let one = evaluate(&model, &c, Split::Test, task, 1).unwrap();
    let three = evaluate(&model, &c, Split::Test, task, 3).unwrap();
    assert_eq!(one.scores, three.scores);
}

/// Nothing after the last input hour reaches the score; the last input hour
/// does.
#[test]
fn no_information_after_the_input_window() {
    let c = small_cohort();
    for flags in AblationFlags::table_rows().into_iter().map(|(_, f)| f) {
        let task = TaskSpec::new(4, 2).unwrap();
        let model = Model::new(ModelConfig::default(), flags, vec![task], c.variable_specs.clone(), 2).unwrap();
        for r in c.records.iter().take(6) {
            let base = model.infer(r, task).unwrap().probability;
            let mut future = r.clone();
            let first_hidden = future.vitals.col_of_hour(task.input_last(r.anchor_hour) + 1).unwrap();
            for row in future.vitals.values.iter_mut() {
                for v in row[first_hidden..].iter_mut() {
                    *v *= 3.0;
                }
            }
            assert_eq!(model.infer(&future, task).unwrap().probability, base);
            // Whole column: the text-only path bins numbers, so one small change can vanish.
            let mut past = r.clone();
            for row in past.vitals.values.iter_mut() {
                row[first_hidden - 1] *= 3.0;
            }
            assert_ne!(model.infer(&past, task).unwrap().probability, base, "{flags:?} {}", r.stay_id);
        }
    }
}

/// Negatives relabelled so that only a heart-rate climb separates the
/// classes.
fn hr_only_cohort(n: usize, seed: u64) -> Cohort {
    let base = generate_synthetic(&CohortConfig { n_positive: 1, n_negative: n, note_signal: 0.0, ..CohortConfig::default() }, seed).unwrap();
    let hr = index_of(&base.variable_specs, "hr").unwrap();
    let records = base
        .records
        .into_iter()
        .filter(|r| !r.label.is_positive())
        .enumerate()
        .map(|(i, mut r)| {
            if i % 2 == 0 {
                r.label = Label::Positive;
                r.onset_hour = Some(r.anchor_hour);
                let end = r.vitals.n_hours();
                for (j, v) in r.vitals.values[hr][end - 24..].iter_mut().enumerate() {
                    *v += 4.0 * (j + 1) as f64;
                }
            }
            r
        })
        .collect();
    split(Cohort::new(records, base.variable_specs), [0.6, 0.2, 0.2], seed).unwrap()
}

#[test]
fn saliency_finds_the_single_informative_variable() {
    let c = hr_only_cohort(240, 6);
    let task = TaskSpec::new(4, 1).unwrap();
    let flags: AblationFlags = "no-summary".parse().unwrap();
    let model = train_task(&c, &[task], &ModelConfig::default(), &TrainConfig::default(), flags, 0).unwrap();
    let e = evaluate(&model, &c, Split::Test, task, 1).unwrap();
    let map = mean_saliency(&model, &c, Split::Test, task, 1).unwrap();
    assert!(!map.untrained);
    let means: Vec<f64> = (0..map.variables.len()).map(|i| map.row_mean(i)).collect();
    eprintln!("auc {:.3} row means {means:.3?}", e.auc);
    let best = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    assert_eq!(map.variables[best], "hr");
}
