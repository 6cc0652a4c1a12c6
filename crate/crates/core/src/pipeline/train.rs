use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Model, Sample};
use super::{par_map, StageConfig};
use crate::cohort::VitalsMatrix;
use crate::error::{Error, Result};
use crate::numcore::{Sgd, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub stage1: Vec<EpochLog>,
    pub stage1_skipped: bool,
    pub stage1_best_epoch: Option<usize>,
    pub stage2: Vec<EpochLog>,
    pub stage2_best_epoch: Option<usize>,
}

impl TrainingLog {
    pub fn classifier_trained(&self) -> bool {
        self.stage2_best_epoch.is_some()
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Regression,
    Classification { joint: bool },
}

fn set_stage(model: &mut Model, stage: Stage) {
    let layers = model.backbone.config.layers;
    let frozen: Vec<bool> = (0..layers)
        .map(|l| model.backbone.config.is_frozen(l))
        .collect();
    let learn_scale = model.config().postproc.learn_scale;
    let store = &mut model.store;
    store.iter_mut().for_each(|p| p.trainable = false);
    let stage1 = |store: &mut crate::numcore::ParamStore| {
        store.set_trainable("reprog.", true);
        store.set_trainable("head.", true);
        if learn_scale {
            store.set_trainable("postproc.s", true);
        }
        for (l, f) in frozen.iter().enumerate() {
            if !f {
                store.set_trainable(&format!("backbone.{l}."), true);
            }
        }
    };
    match stage {
        Stage::Regression => stage1(store),
        Stage::Classification { joint } => {
            store.set_trainable("cls.1.", true);
            store.set_trainable("cls.2.", true);
            if joint {
                stage1(store);
            }
        }
    }
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64))
}

fn step(model: &mut Model, sgd: &mut Sgd, tape: &Tape, loss: Var, what: &str) -> Result<f64> {
    let l = tape.scalar(loss);
    if !l.is_finite() {
        return Err(Error::Divergence(format!("{what} loss is {l}")));
    }
    let grads = tape.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&grads.params());
    if !model.store.grad_norm().is_finite() {
        return Err(Error::Divergence(format!("{what} gradient is not finite")));
    }
    sgd.step(&mut model.store);
    Ok(l)
}

/// Mean stage-1 loss, no gradient.
pub fn stage1_loss(model: &Model, samples: &[Sample], jobs: usize) -> Result<f64> {
    let losses = par_map(samples, jobs, |s| {
        let mut tape = Tape::new();
        let protos = model.prototypes(&mut tape)?;
        let l = model.stage1_loss(&mut tape, s, protos)?;
        Ok(tape.scalar(l))
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

struct EarlyStop {
    best: f64,
    best_epoch: Option<usize>,
    snapshot: Vec<Tensor>,
    bad: usize,
}

impl EarlyStop {
    fn new(model: &Model) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            best_epoch: None,
            snapshot: model.store.snapshot(),
            bad: 0,
        }
    }

    /// True when training should stop.
    fn observe(&mut self, model: &Model, epoch: usize, loss: f64, patience: usize) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.snapshot = model.store.snapshot();
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.bad >= patience.max(1)
    }
}

/// Minibatch SGD on the normalized MSE of the constrained forecast, keeping
/// the parameters of the best validation epoch. A no-op when prior
/// prediction is off.
pub fn train_stage1<R: Rng>(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &StageConfig,
    jobs: usize,
    rng: &mut R,
) -> Result<()> {
    model.meta.log.stage1.clear();
    if !model.flags().use_prior_prediction {
        model.meta.log.stage1_skipped = true;
        return Ok(());
    }
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    set_stage(model, Stage::Regression);
    let mut sgd = Sgd::new(cfg.sgd);
    let mut stop = EarlyStop::new(model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let protos = model.prototypes(&mut tape)?;
            let losses = batch
                .iter()
                .map(|&i| model.stage1_loss(&mut tape, &train[i], protos))
                .collect::<Result<Vec<_>>>()?;
            let loss = mean_of(&mut tape, &losses)?;
            total += step(model, &mut sgd, &tape, loss, "stage 1")? * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            stage1_loss(model, val, jobs)?
        };
        log::info!("stage 1 epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        model.meta.log.stage1.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "stage 1 validation loss is {val_loss}"
            )));
        }
        if stop.observe(model, epoch, val_loss, cfg.patience) {
            break;
        }
    }
    model.store.restore(&stop.snapshot);
    model.meta.log.stage1_best_epoch = stop.best_epoch;
    Ok(())
}

/// Stage-2 matrices under the trained stage 1.
pub fn stage2_inputs(model: &Model, samples: &[Sample], jobs: usize) -> Result<Vec<VitalsMatrix>> {
    par_map(samples, jobs, |s| {
        let pred = model.forecast(s)?;
        model.stage2_input(s, pred.as_ref().map(|p| p.constrained.as_slice()))
    })
}

fn readouts(
    model: &Model,
    samples: &[Sample],
    inputs: &[VitalsMatrix],
    jobs: usize,
) -> Result<Tensor> {
    let pairs: Vec<(&Sample, &VitalsMatrix)> = samples.iter().zip(inputs).collect();
    let rows = par_map(&pairs, jobs, |(s, m)| model.embed_h(s, m))?;
    let d = rows.first().map_or(0, |r| r.cols());
    Tensor::matrix(
        rows.len(),
        d,
        rows.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

fn rows_of(h: &Tensor, idx: &[usize]) -> Tensor {
    let d = h.cols();
    Tensor::matrix(
        idx.len(),
        d,
        idx.iter().flat_map(|&i| h.row_slice(i).to_vec()).collect(),
    )
    .expect("row gather")
}

fn bce(model: &Model, h: &Tensor, labels: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let logits = model.classify(&mut tape, x)?;
    let l = tape.bce_with_logits(logits, labels)?;
    Ok(tape.scalar(l))
}

/// Binary cross-entropy on `h_t` with stage 1 frozen (unless `joint`). The
/// readout is standardized with training-set statistics first.
pub fn train_stage2<R: Rng>(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &StageConfig,
    joint: bool,
    jobs: usize,
    rng: &mut R,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    model.meta.log.stage2.clear();
    let train_in = stage2_inputs(model, train, jobs)?;
    let val_in = stage2_inputs(model, val, jobs)?;
    let h_train = readouts(model, train, &train_in, jobs)?;
    if !h_train.is_finite() {
        return Err(Error::Divergence("non-finite stage 2 readout".into()));
    }
    let (n, d) = h_train.dims2();
    let mut center = vec![0.0; d];
    let mut spread = vec![0.0; d];
    for r in 0..n {
        for (c, v) in center.iter_mut().zip(h_train.row_slice(r)) {
            *c += v / n as f64;
        }
    }
    for r in 0..n {
        for ((s, v), c) in spread.iter_mut().zip(h_train.row_slice(r)).zip(&center) {
            *s += (v - c).powi(2) / n as f64;
        }
    }
    let cid = model.cls_center;
    let sid = model.cls_scale;
    model.store.get_mut(cid).value = Tensor::row(center);
    model.store.get_mut(sid).value =
        Tensor::row(spread.iter().map(|v| v.sqrt().max(1e-6)).collect());

    let y_train: Vec<f64> = train.iter().map(|s| f64::from(u8::from(s.label))).collect();
    let y_val: Vec<f64> = val.iter().map(|s| f64::from(u8::from(s.label))).collect();
    let mut h_val = if val.is_empty() {
        None
    } else {
        Some(readouts(model, val, &val_in, jobs)?)
    };

    set_stage(model, Stage::Classification { joint });
    let mut sgd = Sgd::new(cfg.sgd);
    let mut stop = EarlyStop::new(model);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let h = if joint {
                let protos = model.prototypes(&mut tape)?;
                let rows = batch
                    .iter()
                    .map(|&i| model.readout_for(&mut tape, &train[i], &train_in[i], protos))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)?
            } else {
                tape.constant(rows_of(&h_train, batch))
            };
            let logits = model.classify(&mut tape, h)?;
            let targets: Vec<f64> = batch.iter().map(|&i| y_train[i]).collect();
            let loss = tape.bce_with_logits(logits, &targets)?;
            total += step(model, &mut sgd, &tape, loss, "stage 2")? * batch.len() as f64;
        }
        let train_loss = total / n as f64;
        if joint && !val.is_empty() {
            h_val = Some(readouts(model, val, &val_in, jobs)?);
        }
        let val_loss = match &h_val {
            Some(h) => bce(model, h, &y_val)?,
            None => train_loss,
        };
        model.meta.log.stage2.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if stop.observe(model, epoch, val_loss, cfg.patience) {
            break;
        }
    }
    log::info!(
        "stage 2 stopped after {} epochs, best val bce {:.4}",
        model.meta.log.stage2.len(),
        stop.best
    );
    model.store.restore(&stop.snapshot);
    model.meta.log.stage2_best_epoch = stop.best_epoch;
    Ok(())
}
