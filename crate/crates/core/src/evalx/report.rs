use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, confusion_at, RocCurve};
use crate::cohort::{derive_seed, Cohort, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::numcore::Tape;
use crate::pipeline::{
    assemble_stage2_input, par_map, samples_for, Model, Sample, TaskEval, TaskSpec,
};
use crate::postproc;

/// Per-variable MSE of `preds` against each sample's target, `(normalized,
/// raw)`. Normalized units use each sample's own window statistics.
pub fn mse_of(samples: &[Sample], preds: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.first().map_or(0, |s| s.target.len());
    let mut norm = vec![0.0; n];
    let mut raw = vec![0.0; n];
    for (s, p) in samples.iter().zip(preds) {
        for i in 0..n {
            let e = p[i] - s.target[i];
            raw[i] += e * e;
            norm[i] += (e / s.norm.scale[i]).powi(2);
        }
    }
    let m = samples.len().max(1) as f64;
    norm.iter_mut().chain(raw.iter_mut()).for_each(|v| *v /= m);
    (norm, raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub variables: Vec<String>,
    pub tasks: Vec<TaskSpec>,
    /// `[task][variable]`.
    pub normalized: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
}

impl MseTable {
    /// One row per task offset, one column per variable.
    pub fn to_csv(&self, raw: bool) -> String {
        let mut s = String::from("offset,horizon");
        for v in &self.variables {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
        let rows = if raw { &self.raw } else { &self.normalized };
        for (t, row) in self.tasks.iter().zip(rows) {
            let _ = write!(s, "-{},{}", t.offset_k, t.horizon);
            for v in row {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// Forecast MSE of `model` on the test split for each task, restricted to
/// `variables` when given.
pub fn mse_table(
    model: &Model,
    cohort: &Cohort,
    tasks: &[TaskSpec],
    variables: Option<&[String]>,
    jobs: usize,
) -> Result<MseTable> {
    let names: Vec<String> = model.meta.specs.iter().map(|s| s.name.clone()).collect();
    let keep: Vec<usize> = match variables {
        Some(vs) => vs
            .iter()
            .map(|v| {
                names
                    .iter()
                    .position(|n| n == v)
                    .ok_or_else(|| Error::MissingColumn(v.clone()))
            })
            .collect::<Result<_>>()?,
        None => (0..names.len()).collect(),
    };
    let mut normalized = Vec::new();
    let mut raw = Vec::new();
    for &task in tasks {
        let samples = samples_for(model, cohort, Split::Test, task, jobs)?;
        let preds = par_map(&samples, jobs, |s| model.predict(s).map(|p| p.constrained))?;
        let (n, r) = mse_of(&samples, &preds);
        normalized.push(keep.iter().map(|&i| n[i]).collect());
        raw.push(keep.iter().map(|&i| r[i]).collect());
    }
    Ok(MseTable {
        variables: keep.iter().map(|&i| names[i].clone()).collect(),
        tasks: tasks.to_vec(),
        normalized,
        raw,
    })
}

/// Out-of-envelope spikes added to raw forecasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeConfig {
    /// Probability that a record is spiked.
    pub record_rate: f64,
    pub variables_per_record: usize,
    /// Distance past the envelope edge, as a fraction of the validated width.
    pub magnitude: f64,
    pub seed: u64,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            record_rate: 0.3,
            variables_per_record: 2,
            magnitude: 0.5,
            seed: 7,
        }
    }
}

impl SpikeConfig {
    /// Spiked copy of `raw` and the variables hit.
    pub fn inject(
        &self,
        model: &Model,
        sample: &Sample,
        index: usize,
        raw: &[f64],
    ) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index as u64));
        let mut out = raw.to_vec();
        let mut hit = Vec::new();
        if !rng.random_bool(self.record_rate) {
            return (out, hit);
        }
        let n = raw.len();
        while hit.len() < self.variables_per_record.min(n) {
            let i = rng.random_range(0..n);
            if hit.contains(&i) {
                continue;
            }
            let e = &model.ranges.entries[i];
            let (lo, hi) = model
                .ranges
                .envelope(i, sample.last[i], sample.task.horizon as f64);
            let push = self.magnitude * (e.hi - e.lo);
            out[i] = if rng.random_bool(0.5) {
                hi + push
            } else {
                lo - push
            };
            hit.push(i);
        }
        (out, hit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub task: TaskSpec,
    /// Normalized per-variable MSE without and with the constraint.
    pub mse_without: Vec<f64>,
    pub mse_with: Vec<f64>,
    /// Variables that received at least one spike.
    pub affected: Vec<bool>,
    pub auc_without: f64,
    pub auc_with: f64,
}

impl AbRow {
    pub fn delta_mse(&self) -> Vec<f64> {
        self.mse_with
            .iter()
            .zip(&self.mse_without)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn delta_auc(&self) -> f64 {
        self.auc_with - self.auc_without
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocAb {
    pub variables: Vec<String>,
    pub rows: Vec<AbRow>,
}

impl PostprocAb {
    /// `offset,variable,affected,mse_without,mse_with,delta_mse,delta_auc`
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("offset,variable,affected,mse_without,mse_with,delta_mse,delta_auc\n");
        for r in &self.rows {
            let d = r.delta_mse();
            for (i, v) in self.variables.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{v},{},{:.6},{:.6},{:.6},{:.6}",
                    r.task.offset_k,
                    r.affected[i],
                    r.mse_without[i],
                    r.mse_with[i],
                    d[i],
                    r.delta_auc()
                );
            }
        }
        s
    }
}

/// Paired comparison on the test split: the control arm feeds raw forecasts
/// (optionally spiked) to stage 2, the treatment arm reviews and projects
/// them first. With `treated = false` both arms are raw.
pub fn postproc_ab(
    model: &Model,
    cohort: &Cohort,
    tasks: &[TaskSpec],
    spikes: Option<&SpikeConfig>,
    treated: bool,
    jobs: usize,
) -> Result<PostprocAb> {
    if !model.flags().use_prior_prediction {
        return Err(Error::Config(
            "post-processing comparison needs prior prediction".into(),
        ));
    }
    let agent = model.config().postproc.build_agent();
    let mut rows = Vec::new();
    for &task in tasks {
        let samples = samples_for(model, cohort, Split::Test, task, jobs)?;
        let indexed: Vec<(usize, &Sample)> = samples.iter().enumerate().collect();
        let arms = par_map(&indexed, jobs, |&(idx, s)| {
            let raw = model.predict(s)?.raw;
            let (raw, hit) = match spikes {
                Some(c) => c.inject(model, s, idx, &raw),
                None => (raw, Vec::new()),
            };
            let with = if treated {
                let review = postproc::review(&raw, &s.last, &model.ranges, agent.as_ref())?;
                postproc::apply(
                    &raw,
                    &review.corrections,
                    model.store.value(model.scale).data(),
                    &s.last,
                    &model.ranges,
                    task.horizon as f64,
                )?
            } else {
                raw.clone()
            };
            let p_without =
                model.score_matrix(s, &assemble_stage2_input(&s.history, Some(&raw))?)?;
            let p_with = model.score_matrix(s, &assemble_stage2_input(&s.history, Some(&with))?)?;
            Ok((raw, with, hit, p_without, p_with))
        })?;
        let n = model.n_vars();
        let mut affected = vec![false; n];
        let (mut without, mut with, mut p0, mut p1) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (raw, w, hit, a, b) in arms {
            hit.iter().for_each(|&i| affected[i] = true);
            without.push(raw);
            with.push(w);
            p0.push(a);
            p1.push(b);
        }
        let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
        rows.push(AbRow {
            task,
            mse_without: mse_of(&samples, &without).0,
            mse_with: mse_of(&samples, &with).0,
            affected,
            auc_without: auc(&p0, &labels)?,
            auc_with: auc(&p1, &labels)?,
        });
    }
    Ok(PostprocAb {
        variables: model.meta.specs.iter().map(|s| s.name.clone()).collect(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub variables: Vec<String>,
    pub hours: Vec<i64>,
    /// `[variable][hour]`, in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
    /// The classifier had not been trained.
    pub untrained: bool,
}

impl SaliencyMap {
    pub fn row_mean(&self, var: usize) -> f64 {
        let r = &self.values[var];
        r.iter().sum::<f64>() / r.len().max(1) as f64
    }

    /// Header `variable,h<hour>…`, one row per variable.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable");
        for h in &self.hours {
            let _ = write!(s, ",h{h}");
        }
        s.push('\n');
        for (v, row) in self.variables.iter().zip(&self.values) {
            s.push_str(v);
            for x in row {
                let _ = write!(s, ",{x:.6}");
            }
            s.push('\n');
        }
        s
    }
}

fn max_normalize(values: &mut [Vec<f64>]) {
    let max = values.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    if max > 0.0 {
        values.iter_mut().flatten().for_each(|v| *v /= max);
    }
}

/// `|∂logit/∂x ⊙ x|` over the normalized stage-2 input, scaled to a maximum
/// of one.
pub fn saliency(model: &Model, record: &PatientRecord, task: TaskSpec) -> Result<SaliencyMap> {
    let sample = model.prepare(record, task)?;
    let pred = model.forecast(&sample)?;
    let matrix = model.stage2_input(&sample, pred.as_ref().map(|p| p.constrained.as_slice()))?;
    let mut tape = Tape::new();
    let (logit, x) = model.stage2_tape(&mut tape, &sample, &matrix)?;
    let grads = tape.backward(logit)?;
    let xv = tape.value(x);
    let (n, t) = xv.dims2();
    let mut values: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..t)
                .map(|j| {
                    grads
                        .get(x)
                        .map_or(0.0, |g| (g[i * t + j] * xv.get(i, j)).abs())
                })
                .collect()
        })
        .collect();
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite saliency".into()));
    }
    max_normalize(&mut values);
    Ok(SaliencyMap {
        variables: model.meta.specs.iter().map(|s| s.name.clone()).collect(),
        hours: (0..t as i64).map(|c| matrix.start_hour + c).collect(),
        values,
        untrained: !model.meta.log.classifier_trained(),
    })
}

/// Element-wise mean of per-record maps over a split, renormalized. Hours
/// are relative to the evaluation hour.
pub fn mean_saliency(
    model: &Model,
    cohort: &Cohort,
    split: Split,
    task: TaskSpec,
    jobs: usize,
) -> Result<SaliencyMap> {
    let records = cohort.records_in(split);
    let maps = par_map(&records, jobs, |r| saliency(model, r, task))?;
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("no records for saliency".into()))?;
    let (n, t) = (first.values.len(), first.hours.len());
    let mut values = vec![vec![0.0; t]; n];
    for m in &maps {
        for (acc, row) in values.iter_mut().zip(&m.values) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / maps.len() as f64;
            }
        }
    }
    max_normalize(&mut values);
    Ok(SaliencyMap {
        variables: first.variables.clone(),
        hours: (0..t as i64).map(|c| c - (t as i64 - 1)).collect(),
        values,
        untrained: first.untrained,
    })
}

/// `threshold,fpr,tpr`
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{:.6},{:.6}", p.threshold, p.fpr, p.tpr);
    }
    s
}

/// `offset,horizon,n,auc,tpr,fpr,f1` at the 0.5 threshold.
pub fn metrics_csv(evals: &[TaskEval]) -> String {
    let mut s = String::from("offset,horizon,n,auc,tpr,fpr,f1\n");
    for e in evals {
        let c = confusion_at(&e.scores, &e.labels, 0.5);
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            e.task.offset_k,
            e.task.horizon,
            e.scores.len(),
            e.auc,
            c.tpr,
            c.fpr,
            c.f1
        );
    }
    s
}
