use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::TrainingLog;
use super::{AblationFlags, ModelConfig, TaskSpec};
use crate::backbone::{Backbone, RegressionHead};
use crate::cohort::{PatientRecord, VariableSpec, VitalsMatrix};
use crate::error::{Error, Result};
use crate::numcore::{
    sigmoid, Activation, Checkpoint, Mlp2, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::postproc::{self, Action, Agent, RangeTable};
use crate::prompt::{
    detect_warnings, render_prompt, stats_line, summarize_stats, tokenize_embed, PromptSpec,
    PromptTemplate, TaskKind, Vocab, DEFAULT_DEAD_BAND,
};
use crate::reprogram::{InstanceNorm, Reprogrammer};

const MODEL_FORMAT: &str = "sepsis-model";

/// One record prepared for one task.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stay_id: String,
    pub task: TaskSpec,
    pub label: bool,
    /// Observed window, hours `anchor − 30 ..= t_k − h`.
    pub history: VitalsMatrix,
    pub norm: InstanceNorm,
    /// Normalized history `[N, T]`.
    pub x: Tensor,
    /// Prompt embeddings for the regression and classification prompts.
    pub prefix_reg: Option<Tensor>,
    pub prefix_cls: Option<Tensor>,
    pub prompt_truncated: bool,
    pub last: Vec<f64>,
    /// Recorded values at `t_k`.
    pub target: Vec<f64>,
}

impl Sample {
    pub fn target_normalized(&self) -> Vec<f64> {
        self.target
            .iter()
            .enumerate()
            .map(|(i, &v)| self.norm.normalize(i, v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Raw forecast `O_t`.
    pub raw: Vec<f64>,
    /// Constrained forecast `X_t`.
    pub constrained: Vec<f64>,
    pub fallback: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub probability: f64,
    pub prediction: Option<Prediction>,
    /// Matrix the classifier saw; saliency is taken with respect to it.
    pub stage2_input: VitalsMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
    pub specs: Vec<VariableSpec>,
    pub log: TrainingLog,
}

pub struct Model {
    pub meta: ModelMeta,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub reprog: Reprogrammer,
    pub head: RegressionHead,
    /// Increment scale `s`, `[1, N]`.
    pub scale: ParamId,
    pub cls_center: ParamId,
    pub cls_scale: ParamId,
    pub classifier: Mlp2,
    pub ranges: RangeTable,
    vocab: Vocab,
    template: PromptTemplate,
    agent: Box<dyn Agent>,
}

/// History with `X_t` appended as the column for `t_k`; history only when
/// there is no forecast.
pub fn assemble_stage2_input(history: &VitalsMatrix, x_t: Option<&[f64]>) -> Result<VitalsMatrix> {
    let mut m = history.clone();
    if let Some(x) = x_t {
        m.push_column(x)?;
    }
    Ok(m)
}

impl Model {
    pub fn new(
        config: ModelConfig,
        flags: AblationFlags,
        tasks: Vec<TaskSpec>,
        specs: Vec<VariableSpec>,
        seed: u64,
    ) -> Result<Self> {
        let vocab = Vocab::default();
        if config.backbone.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "backbone vocabulary {} smaller than tokenizer vocabulary {}",
                config.backbone.vocab_size,
                vocab.len()
            )));
        }
        let n = specs.len();
        if config.backbone.context <= n {
            return Err(Error::Config(format!(
                "context {} leaves no room beside {n} feature rows",
                config.backbone.context
            )));
        }
        for t in &tasks {
            t.validate()?;
        }
        let ranges = RangeTable::from_specs(&specs);
        ranges.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, &config.backbone)?;
        let d = backbone.width();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reprog = Reprogrammer::new(
            &mut store,
            &config.reprogram,
            n,
            d,
            config.backbone.vocab_size,
            &mut rng,
        )?;
        let head = RegressionHead::new(&mut store, n, d, &mut rng)?;
        let scale = store.add(
            "postproc.s",
            Tensor::filled(&[1, n], 1.0),
            config.postproc.learn_scale,
        )?;
        let h = 2 * d;
        let cls_center = store.add("cls.center", Tensor::zeros(&[1, h]), false)?;
        let cls_scale = store.add("cls.scale", Tensor::filled(&[1, h], 1.0), false)?;
        let classifier = Mlp2::new(
            &mut store,
            "cls",
            h,
            config.classifier_hidden,
            1,
            Activation::Relu,
            true,
            &mut rng,
        )?;
        let agent = config.postproc.build_agent();
        Ok(Model {
            meta: ModelMeta {
                format: MODEL_FORMAT.into(),
                version: 1,
                config,
                flags,
                tasks,
                seed,
                specs,
                log: TrainingLog::default(),
            },
            store,
            backbone,
            reprog,
            head,
            scale,
            cls_center,
            cls_scale,
            classifier,
            ranges,
            vocab,
            template: PromptTemplate::default(),
            agent,
        })
    }

    pub fn flags(&self) -> AblationFlags {
        self.meta.flags
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn n_vars(&self) -> usize {
        self.meta.specs.len()
    }

    fn prompt_budget(&self) -> usize {
        self.config()
            .prompt_tokens
            .min(self.config().backbone.context - self.n_vars())
    }

    fn prefix(
        &self,
        history: &VitalsMatrix,
        note: &str,
        kind: TaskKind,
    ) -> Result<(Option<Tensor>, bool)> {
        if !self.flags().use_patient_summary {
            return Ok((None, false));
        }
        let stats = summarize_stats(history, &self.meta.specs, DEFAULT_DEAD_BAND)?;
        let warnings = detect_warnings(history, &self.meta.specs);
        let prompt = render_prompt(
            &self.template,
            &PromptSpec::new(kind),
            &stats,
            &warnings,
            note,
        );
        let table = self.store.value(self.backbone.embedding);
        let bundle = tokenize_embed(
            &prompt,
            &self.template,
            &self.vocab,
            table,
            self.prompt_budget(),
        )?;
        let truncated = bundle.truncated;
        Ok((bundle.embedding.filter(|e| e.rows() > 0), truncated))
    }

    pub fn prepare(&self, record: &PatientRecord, task: TaskSpec) -> Result<Sample> {
        let anchor = record.anchor_hour;
        let history = record
            .vitals
            .hours(task.input_first(anchor), task.input_last(anchor))?;
        if history.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "stay {} has missing values in its window",
                record.stay_id
            )));
        }
        let col = record
            .vitals
            .col_of_hour(task.target_hour(anchor))
            .ok_or_else(|| {
                Error::Data(format!(
                    "stay {} has no column for hour {}",
                    record.stay_id,
                    task.target_hour(anchor)
                ))
            })?;
        let target = record.vitals.column(col);
        let norm = InstanceNorm::fit(&history, &self.meta.specs, self.config().norm_floor)?;
        let x = Tensor::matrix(history.n_vars(), history.n_hours(), norm.apply(&history))?;
        let (prefix_reg, t1) = self.prefix(&history, &record.note_summary, TaskKind::Regression)?;
        let (prefix_cls, t2) =
            self.prefix(&history, &record.note_summary, TaskKind::Classification)?;
        Ok(Sample {
            stay_id: record.stay_id.clone(),
            task,
            label: record.label.is_positive(),
            last: history.column(history.n_hours() - 1),
            history,
            norm,
            x,
            prefix_reg,
            prefix_cls,
            prompt_truncated: t1 || t2,
            target,
        })
    }

    /// Mean vocabulary embedding of each variable's statistics line, `[N, D]`.
    pub fn text_stat_features(&self, matrix: &VitalsMatrix) -> Result<Tensor> {
        let stats = summarize_stats(matrix, &self.meta.specs, DEFAULT_DEAD_BAND)?;
        let table = self.store.value(self.backbone.embedding);
        let d = table.cols();
        let mut data = Vec::with_capacity(stats.variables.len() * d);
        for s in &stats.variables {
            let ids = self.vocab.encode(&stats_line(s));
            let mut row = vec![0.0; d];
            for &id in &ids {
                for (r, v) in row.iter_mut().zip(table.row_slice(id)) {
                    *r += v / ids.len() as f64;
                }
            }
            data.extend(row);
        }
        Tensor::matrix(stats.variables.len(), d, data)
    }

    /// Text prototypes for this tape, when the reprogrammer is in use.
    pub fn prototypes(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if !self.flags().use_st_extraction {
            return Ok(None);
        }
        let e = tape.param(&self.store, self.backbone.embedding);
        Ok(Some(self.reprog.prototypes(tape, &self.store, e)?))
    }

    /// Feature rows `[N, D]` for a normalized matrix.
    fn features(
        &self,
        tape: &mut Tape,
        x: Var,
        matrix: &VitalsMatrix,
        protos: Option<Var>,
    ) -> Result<Var> {
        let Some(protos) = protos else {
            return Ok(tape.constant(self.text_stat_features(matrix)?));
        };
        let t = tape.value(x).cols();
        let cfg = self.flags().patch_config(&self.config().reprogram.patch, t);
        Ok(self
            .reprog
            .forward(tape, &self.store, x, protos, &cfg)?
            .pooled)
    }

    fn encode(&self, tape: &mut Tape, prefix: Option<&Tensor>, feats: Var) -> Result<(Var, usize)> {
        let (seq, m) = match prefix {
            Some(p) => {
                let p = tape.constant(p.clone());
                (tape.concat_rows(&[p, feats])?, tape.value(p).rows())
            }
            None => (feats, 0),
        };
        Ok((self.backbone.forward(tape, &self.store, seq)?, m))
    }

    /// Normalized forecast `[1, N]`.
    pub fn regress(&self, tape: &mut Tape, sample: &Sample, protos: Option<Var>) -> Result<Var> {
        let x = tape.constant(sample.x.clone());
        let feats = self.features(tape, x, &sample.history, protos)?;
        let (hidden, m) = self.encode(tape, sample.prefix_reg.as_ref(), feats)?;
        self.head.forward(tape, &self.store, hidden, m)
    }

    fn denormalize(&self, sample: &Sample, o: &Tensor) -> Result<Vec<f64>> {
        let raw: Vec<f64> = o
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| sample.norm.denormalize(i, v))
            .collect();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite forecast for stay {}",
                sample.stay_id
            )));
        }
        Ok(raw)
    }

    /// The constrained forecast on the tape, in normalized units. The agent's
    /// choice is fixed per forward pass; each corrected value is `a·O + c`.
    pub fn constrain(
        &self,
        tape: &mut Tape,
        o: Var,
        sample: &Sample,
    ) -> Result<(Var, Option<String>)> {
        if !self.config().postproc.enabled {
            return Ok((o, None));
        }
        let raw = self.denormalize(sample, tape.value(o))?;
        let review = postproc::review(&raw, &sample.last, &self.ranges, self.agent.as_ref())?;
        let n = raw.len();
        let (mut a, mut b, mut shift, mut lo, mut hi) = (
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        );
        let hours = sample.task.horizon as f64;
        for i in 0..n {
            let (mu, sd, last) = (sample.norm.center[i], sample.norm.scale[i], sample.last[i]);
            let c = &review.corrections[i];
            let reference = self.ranges.reference(i, last);
            let v = c.corrected(raw[i], last, reference);
            let (ai, ci) = match c.action {
                Action::None => (1.0, 0.0),
                Action::ClampToBound if v == raw[i] => (1.0, 0.0),
                Action::ShrinkTowardLast { alpha } if v == last + alpha * (raw[i] - last) => {
                    (alpha, (1.0 - alpha) * last)
                }
                _ => (0.0, v),
            };
            a[i] = ai;
            b[i] = (ai * mu + ci - last) / sd;
            shift[i] = (last - mu) / sd;
            let (l, h) = self.ranges.envelope(i, last, hours);
            lo[i] = (l - mu) / sd;
            hi[i] = (h - mu) / sd;
        }
        let y = tape.mul_const(o, &Tensor::row(a))?;
        let y = tape.add_const(y, &Tensor::row(b))?;
        let s = tape.param(&self.store, self.scale);
        let y = tape.mul_row(y, s)?;
        let y = tape.add_const(y, &Tensor::row(shift))?;
        Ok((tape.clamp(y, &lo, &hi)?, review.fallback))
    }

    /// Stage-1 loss for one sample, normalized MSE of the constrained forecast.
    pub fn stage1_loss(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        protos: Option<Var>,
    ) -> Result<Var> {
        let o = self.regress(tape, sample, protos)?;
        let (x, _) = self.constrain(tape, o, sample)?;
        tape.mse(x, &sample.target_normalized())
    }

    pub fn predict(&self, sample: &Sample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let protos = self.prototypes(&mut tape)?;
        let o = self.regress(&mut tape, sample, protos)?;
        let raw = self.denormalize(sample, tape.value(o))?;
        if !self.config().postproc.enabled {
            return Ok(Prediction {
                constrained: raw.clone(),
                raw,
                fallback: None,
            });
        }
        let review = postproc::review(&raw, &sample.last, &self.ranges, self.agent.as_ref())?;
        let constrained = postproc::apply(
            &raw,
            &review.corrections,
            self.store.value(self.scale).data(),
            &sample.last,
            &self.ranges,
            sample.task.horizon as f64,
        )?;
        Ok(Prediction {
            raw,
            constrained,
            fallback: review.fallback,
        })
    }

    /// `[1, 2D]`: mean prompt rows (zeros without a prompt) and mean feature
    /// rows of the backbone output.
    fn readout(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        matrix: &VitalsMatrix,
        x: Var,
        protos: Option<Var>,
    ) -> Result<Var> {
        let feats = self.features(tape, x, matrix, protos)?;
        let (hidden, m) = self.encode(tape, sample.prefix_cls.as_ref(), feats)?;
        let d = self.backbone.width();
        let prompt = if m > 0 {
            let p = tape.slice_rows(hidden, 0, m)?;
            tape.mean_rows(p)
        } else {
            tape.constant(Tensor::zeros(&[1, d]))
        };
        let f = tape.slice_rows(hidden, m, self.n_vars())?;
        let f = tape.mean_rows(f);
        tape.concat_cols(&[prompt, f])
    }

    pub fn stage2_input(&self, sample: &Sample, x_t: Option<&[f64]>) -> Result<VitalsMatrix> {
        let x_t = if self.flags().use_prior_prediction {
            x_t
        } else {
            None
        };
        if self.flags().use_prior_prediction && x_t.is_none() {
            return Err(Error::Config(
                "stage 2 needs a forecast when prior prediction is on".into(),
            ));
        }
        assemble_stage2_input(&sample.history, x_t)
    }

    fn normalized(&self, sample: &Sample, m: &VitalsMatrix) -> Result<Tensor> {
        Tensor::matrix(m.n_vars(), m.n_hours(), sample.norm.apply(m))
    }

    /// Readout `h_t` for a stage-2 matrix, no gradient.
    pub fn embed_h(&self, sample: &Sample, matrix: &VitalsMatrix) -> Result<Tensor> {
        let mut tape = Tape::new();
        let protos = self.prototypes(&mut tape)?;
        let x = tape.constant(self.normalized(sample, matrix)?);
        let h = self.readout(&mut tape, sample, matrix, x, protos)?;
        Ok(tape.value(h).clone())
    }

    /// Readout on an existing tape with a constant input, for joint tuning.
    pub(crate) fn readout_for(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        matrix: &VitalsMatrix,
        protos: Option<Var>,
    ) -> Result<Var> {
        let x = tape.constant(self.normalized(sample, matrix)?);
        self.readout(tape, sample, matrix, x, protos)
    }

    /// Classifier logits for readout rows `[B, 2D]`.
    pub fn classify(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let c = self
            .store
            .value(self.cls_center)
            .data()
            .iter()
            .map(|v| -v)
            .collect();
        let s = self
            .store
            .value(self.cls_scale)
            .data()
            .iter()
            .map(|v| 1.0 / v)
            .collect();
        let rows = tape.value(h).rows();
        let c = repeat_rows(&Tensor::row(c), rows);
        let s = repeat_rows(&Tensor::row(s), rows);
        let z = tape.add_const(h, &c)?;
        let z = tape.mul_const(z, &s)?;
        self.classifier.forward(tape, &self.store, z)
    }

    /// Positive-class logit with the stage-2 matrix as a gradient-carrying
    /// input; returns `(logit, input)`.
    pub fn stage2_tape(
        &self,
        tape: &mut Tape,
        sample: &Sample,
        matrix: &VitalsMatrix,
    ) -> Result<(Var, Var)> {
        let protos = self.prototypes(tape)?;
        let x = tape.input(self.normalized(sample, matrix)?);
        let h = self.readout(tape, sample, matrix, x, protos)?;
        Ok((self.classify(tape, h)?, x))
    }

    /// Constrained forecast when prior prediction is on.
    pub fn forecast(&self, sample: &Sample) -> Result<Option<Prediction>> {
        if self.flags().use_prior_prediction {
            Ok(Some(self.predict(sample)?))
        } else {
            Ok(None)
        }
    }

    pub fn probability(&self, sample: &Sample) -> Result<(f64, Option<Prediction>, VitalsMatrix)> {
        let pred = self.forecast(sample)?;
        let matrix = self.stage2_input(sample, pred.as_ref().map(|p| p.constrained.as_slice()))?;
        Ok((self.score_matrix(sample, &matrix)?, pred, matrix))
    }

    /// Classifier probability for a given stage-2 matrix.
    pub fn score_matrix(&self, sample: &Sample, matrix: &VitalsMatrix) -> Result<f64> {
        let h = self.embed_h(sample, matrix)?;
        let mut tape = Tape::new();
        let h = tape.constant(h);
        let logit = self.classify(&mut tape, h)?;
        Ok(sigmoid(tape.scalar(logit)))
    }

    pub fn infer(&self, record: &PatientRecord, task: TaskSpec) -> Result<Inference> {
        let sample = self.prepare(record, task)?;
        let (probability, prediction, stage2_input) = self.probability(&sample)?;
        Ok(Inference {
            probability,
            prediction,
            stage2_input,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta)?;
        let path = dir.join("model.json");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))?;
        Checkpoint::from_store(&self.store).save(&dir.join("params.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        if meta.format != MODEL_FORMAT {
            return Err(Error::Data(format!(
                "{} is not a model file",
                path.display()
            )));
        }
        let mut model = Model::new(
            meta.config.clone(),
            meta.flags,
            meta.tasks.clone(),
            meta.specs.clone(),
            meta.seed,
        )?;
        let params = Checkpoint::load(&dir.join("params.json"))?.to_store()?;
        model.store.load_values(&params)?;
        model.meta = meta;
        Ok(model)
    }
}

pub(crate) fn repeat_rows(row: &Tensor, n: usize) -> Tensor {
    let d = row.cols();
    let data = (0..n).flat_map(|_| row.data().iter().copied()).collect();
    Tensor::matrix(n, d, data).expect("repeated row shape")
}
