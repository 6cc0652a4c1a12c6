use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, Prediction, Sample};
use super::train::{train_stage1, train_stage2};
use super::{par_map, AblationFlags, ModelConfig, TaskSpec, TrainConfig};
use crate::cohort::{derive_seed, Cohort, Split};
use crate::error::{Error, Result};
use crate::evalx::{auc, mse_of, roc_points, RocCurve};

pub fn samples_for(
    model: &Model,
    cohort: &Cohort,
    split: Split,
    task: TaskSpec,
    jobs: usize,
) -> Result<Vec<Sample>> {
    let records = cohort.records_in(split);
    par_map(&records, jobs, |r| model.prepare(r, task))
}

/// Trains one model on every task in `tasks` (one task per model unless the
/// shared-model mode is used).
pub fn train_task(
    cohort: &Cohort,
    tasks: &[TaskSpec],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    flags: AblationFlags,
    seed: u64,
) -> Result<Model> {
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    let mut model = Model::new(
        model_cfg.clone(),
        flags,
        tasks.to_vec(),
        cohort.variable_specs.clone(),
        seed,
    )?;
    let jobs = train_cfg.jobs;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &task in tasks {
        train.extend(samples_for(&model, cohort, Split::Train, task, jobs)?);
        val.extend(samples_for(&model, cohort, Split::Validation, task, jobs)?);
    }
    if train.iter().all(|s| s.label) || train.iter().all(|s| !s.label) {
        let pos = train.iter().filter(|s| s.label).count();
        return Err(Error::SingleClass {
            positives: pos,
            negatives: train.len() - pos,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    train_stage1(&mut model, &train, &val, &train_cfg.stage1, jobs, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    train_stage2(
        &mut model,
        &train,
        &val,
        &train_cfg.stage2,
        train_cfg.joint_finetune,
        jobs,
        &mut rng,
    )?;
    Ok(model)
}

/// Scores and forecasts for one task on one split.
#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub predictions: Vec<Option<Prediction>>,
    pub auc: f64,
    pub roc: RocCurve,
}

impl TaskEval {
    /// Per-variable MSE of the constrained forecast, `(normalized, raw)`.
    pub fn mse(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let preds: Option<Vec<Vec<f64>>> = self
            .predictions
            .iter()
            .map(|p| p.as_ref().map(|p| p.constrained.clone()))
            .collect();
        preds.map(|p| mse_of(&self.samples, &p))
    }
}

pub fn evaluate(
    model: &Model,
    cohort: &Cohort,
    split: Split,
    task: TaskSpec,
    jobs: usize,
) -> Result<TaskEval> {
    let samples = samples_for(model, cohort, split, task, jobs)?;
    let out = par_map(&samples, jobs, |s| {
        model.probability(s).map(|(p, pred, _)| (p, pred))
    })?;
    let (scores, predictions): (Vec<f64>, Vec<Option<Prediction>>) = out.into_iter().unzip();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let roc = roc_points(&scores, &labels)?;
    Ok(TaskEval {
        task,
        auc: auc(&scores, &labels)?,
        roc,
        samples,
        scores,
        labels,
        predictions,
    })
}

/// Models for each offset (or one shared model) and their test evaluations.
pub fn train_and_evaluate(
    cohort: &Cohort,
    tasks: &[TaskSpec],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    flags: AblationFlags,
    seed: u64,
    shared: bool,
) -> Result<Vec<TaskEval>> {
    let jobs = train_cfg.jobs;
    if shared {
        let model = train_task(cohort, tasks, model_cfg, train_cfg, flags, seed)?;
        tasks
            .iter()
            .map(|&t| evaluate(&model, cohort, Split::Test, t, jobs))
            .collect()
    } else {
        tasks
            .iter()
            .map(|&t| {
                let model = train_task(cohort, &[t], model_cfg, train_cfg, flags, seed)?;
                evaluate(&model, cohort, Split::Test, t, jobs)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: AblationFlags,
    /// `[seed][offset]` test AUC.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl AblationRow {
    pub fn overall(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub offsets: Vec<i64>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `row,summary,patching,prior,st,<offsets…>,mean`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,patient_summary,patching,prior_prediction,st_extraction");
        for k in &self.offsets {
            let _ = write!(s, ",auc_k{k}");
        }
        s.push_str(",mean\n");
        for r in &self.rows {
            let f = r.flags;
            let _ = write!(
                s,
                "{},{},{},{},{}",
                r.name,
                f.use_patient_summary,
                f.use_patching,
                f.use_prior_prediction,
                f.use_st_extraction
            );
            for v in &r.mean {
                let _ = write!(s, ",{v:.6}");
            }
            let _ = writeln!(s, ",{:.6}", r.overall());
        }
        s
    }
}

/// The full model and the four single removals over `offsets`, averaged
/// over `seeds`.
pub fn run_ablation_suite(
    cohort: &Cohort,
    offsets: &[i64],
    seeds: &[u64],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    shared: bool,
) -> Result<AblationReport> {
    let tasks = offsets
        .iter()
        .map(|&k| TaskSpec::new(k, 1))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (name, flags) in AblationFlags::table_rows() {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let evals =
                train_and_evaluate(cohort, &tasks, model_cfg, train_cfg, flags, seed, shared)?;
            let aucs: Vec<f64> = evals.iter().map(|e| e.auc).collect();
            log::info!("ablation {name} seed {seed}: {aucs:?}");
            per_seed.push(aucs);
        }
        let mean = (0..tasks.len())
            .map(|j| per_seed.iter().map(|r| r[j]).sum::<f64>() / per_seed.len().max(1) as f64)
            .collect();
        rows.push(AblationRow {
            name: name.to_string(),
            flags,
            per_seed,
            mean,
        });
    }
    Ok(AblationReport {
        offsets: offsets.to_vec(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCell {
    pub horizon: i64,
    pub offset: i64,
    pub auc: f64,
    pub mse_normalized: Vec<f64>,
    pub mse_raw: Vec<f64>,
    pub roc: RocCurve,
}

impl HorizonCell {
    pub fn mean_mse(&self) -> f64 {
        self.mse_normalized.iter().sum::<f64>() / self.mse_normalized.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub variables: Vec<String>,
    pub cells: Vec<HorizonCell>,
}

impl HorizonReport {
    pub fn cell(&self, horizon: i64, offset: i64) -> Option<&HorizonCell> {
        self.cells
            .iter()
            .find(|c| c.horizon == horizon && c.offset == offset)
    }

    /// Mean normalized MSE over the 1-hour cell at the same offset.
    pub fn degradation(&self, horizon: i64, offset: i64) -> Option<f64> {
        Some(self.cell(horizon, offset)?.mean_mse() / self.cell(1, offset)?.mean_mse())
    }

    /// `horizon,offset,auc,mean_mse,<variable mse…>`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,offset,auc,mean_mse_normalized");
        for v in &self.variables {
            let _ = write!(s, ",mse_{v}");
        }
        s.push('\n');
        for c in &self.cells {
            let _ = write!(
                s,
                "{},{},{:.6},{:.6}",
                c.horizon,
                c.offset,
                c.auc,
                c.mean_mse()
            );
            for m in &c.mse_normalized {
                let _ = write!(s, ",{m:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Stage 1 and 2 per horizon; one ROC and MSE row per `(horizon, offset)`.
pub fn run_horizon_sweep(
    cohort: &Cohort,
    horizons: &[i64],
    offsets: &[i64],
    seed: u64,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    shared: bool,
) -> Result<HorizonReport> {
    let mut cells = Vec::new();
    for &h in horizons {
        let tasks = offsets
            .iter()
            .map(|&k| TaskSpec::new(k, h))
            .collect::<Result<Vec<_>>>()?;
        let evals = train_and_evaluate(
            cohort,
            &tasks,
            model_cfg,
            train_cfg,
            AblationFlags::default(),
            seed,
            shared,
        )?;
        for e in evals {
            let (mse_normalized, mse_raw) = e
                .mse()
                .ok_or_else(|| Error::Config("horizon sweep needs prior prediction".into()))?;
            cells.push(HorizonCell {
                horizon: h,
                offset: e.task.offset_k,
                auc: e.auc,
                mse_normalized,
                mse_raw,
                roc: e.roc,
            });
        }
    }
    Ok(HorizonReport {
        variables: cohort
            .variable_specs
            .iter()
            .map(|s| s.name.clone())
            .collect(),
        cells,
    })
}
