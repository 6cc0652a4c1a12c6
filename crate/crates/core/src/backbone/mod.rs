//! Compact seeded transformer standing in for a pretrained language model:
//! a frozen vocabulary table, pre-norm blocks with bidirectional attention,
//! and the regression head that reads the feature positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    Activation, LayerNorm, Linear, Mlp2, MultiHeadAttention, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab_size: usize,
    /// Frozen block indices; `None` freezes every block but the last.
    pub frozen_layers: Option<Vec<usize>>,
    pub ff_mult: usize,
    /// Adds sinusoidal position vectors to the input sequence.
    pub positional: bool,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 4,
            width: 64,
            heads: 4,
            context: 256,
            vocab_size: 512,
            frozen_layers: None,
            ff_mult: 2,
            positional: true,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn is_frozen(&self, layer: usize) -> bool {
        match &self.frozen_layers {
            Some(f) => f.contains(&layer),
            None => layer + 1 < self.layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone width {} must be a positive multiple of {} heads",
                self.width, self.heads
            )));
        }
        if let Some(f) = &self.frozen_layers {
            if let Some(bad) = f.iter().find(|&&l| l >= self.layers) {
                return Err(Error::Config(format!(
                    "frozen layer {bad} ≥ layer count {}",
                    self.layers
                )));
            }
        }
        if self.context == 0 || self.vocab_size < 4 {
            return Err(Error::Config(
                "backbone context and vocabulary must be non-trivial".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp2,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// `V × D` vocabulary table E; never trained.
    pub embedding: ParamId,
    pub blocks: Vec<Block>,
}

/// Standard sine/cosine position table `[len, d]`.
pub fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 * rate;
            t.set(pos, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    t
}

impl Backbone {
    /// Weights come from `config.seed` alone, so two backbones with the same
    /// config are identical whatever else shares the store.
    pub fn init(store: &mut ParamStore, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.width;
        let embedding = store.add_normal(
            "backbone.embed",
            &[config.vocab_size, d],
            1.0,
            false,
            &mut rng,
        )?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let tr = !config.is_frozen(l);
            let p = format!("backbone.{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d, tr)?,
                attn: MultiHeadAttention::new(
                    store,
                    &format!("{p}.attn"),
                    d,
                    d,
                    d,
                    config.heads,
                    tr,
                    &mut rng,
                )?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d, tr)?,
                ff: Mlp2::new(
                    store,
                    &format!("{p}.ff"),
                    d,
                    d * config.ff_mult,
                    d,
                    Activation::Relu,
                    tr,
                    &mut rng,
                )?,
            });
        }
        Ok(Backbone {
            config: config.clone(),
            embedding,
            blocks,
        })
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn check_context(&self, len: usize) -> Result<()> {
        if len > self.config.context {
            return Err(Error::ContextOverflow {
                len,
                context: self.config.context,
            });
        }
        Ok(())
    }

    /// Pre-norm blocks over the whole `[L, D]` sequence without a causal mask.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        let (len, d) = tape.value(seq).dims2();
        self.check_context(len)?;
        if d != self.width() {
            return Err(Error::Shape {
                op: "backbone",
                left: vec![len, d],
                right: vec![self.width()],
            });
        }
        let mut x = seq;
        if self.config.positional && len > 0 {
            x = tape.add_const(x, &sinusoidal(len, d))?;
        }
        for b in &self.blocks {
            let h = b.ln1.forward(tape, store, x)?;
            let a = b.attn.forward(tape, store, h, h)?;
            x = tape.add(x, a)?;
            let h = b.ln2.forward(tape, store, x)?;
            let f = b.ff.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        Ok(x)
    }
}

/// Linear map from the flattened feature positions to one value per
/// variable.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    pub linear: Linear,
    pub n_vars: usize,
}

impl RegressionHead {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        n_vars: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(RegressionHead {
            linear: Linear::new(store, "head.reg", n_vars * width, n_vars, true, true, rng)?,
            n_vars,
        })
    }

    /// Drops the first `m` (prefix) rows and returns `[1, N]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hidden: Var,
        m: usize,
    ) -> Result<Var> {
        let (len, d) = tape.value(hidden).dims2();
        if len != m + self.n_vars {
            return Err(Error::Shape {
                op: "head_regression",
                left: vec![len, d],
                right: vec![m, self.n_vars],
            });
        }
        let feats = tape.slice_rows(hidden, m, self.n_vars)?;
        let flat = tape.reshape(feats, 1, self.n_vars * d)?;
        self.linear.forward(tape, store, flat)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn small(layers: usize, positional: bool) -> BackboneConfig {
        BackboneConfig {
            layers,
            width: 8,
            heads: 2,
            context: 16,
            vocab_size: 32,
            positional,
            seed: 3,
            ..Default::default()
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Backbone::init(&mut a, &small(2, true)).unwrap();
        Backbone::init(&mut b, &small(2, true)).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn default_freezes_all_but_last_block() {
        let mut s = ParamStore::new();
        Backbone::init(&mut s, &small(3, true)).unwrap();
        let names = s.trainable_names();
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| n.starts_with("backbone.2.")));
        let mut s = ParamStore::new();
        let cfg = BackboneConfig {
            frozen_layers: Some(vec![0, 1, 2]),
            ..small(3, true)
        };
        Backbone::init(&mut s, &cfg).unwrap();
        assert!(s.trainable_names().is_empty());
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut s = ParamStore::new();
        let bb = Backbone::init(&mut s, &small(0, false)).unwrap();
        let x = random(5, 8, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = bb.forward(&mut tape, &s, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn context_overflow_is_an_error() {
        let mut s = ParamStore::new();
        let bb = Backbone::init(&mut s, &small(1, true)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(random(17, 8, 1));
        assert!(matches!(
            bb.forward(&mut tape, &s, xv),
            Err(Error::ContextOverflow {
                len: 17,
                context: 16
            })
        ));
    }

    #[test]
    fn permuting_rows_permutes_output_without_positions() {
        let mut s = ParamStore::new();
        let bb = Backbone::init(&mut s, &small(2, false)).unwrap();
        let x = random(4, 8, 2);
        let perm = [3usize, 1, 0, 2];
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let xp = tape.gather_rows(xv, &perm).unwrap();
        let y = bb.forward(&mut tape, &s, xv).unwrap();
        let yp = bb.forward(&mut tape, &s, xp).unwrap();
        let y_perm = tape.gather_rows(y, &perm).unwrap();
        assert!(tape.value(y_perm).max_abs_diff(tape.value(yp)) < 1e-12);
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * g[i] + b[i])
            .collect()
    }

    fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
        (0..w.cols())
            .map(|c| {
                x.iter()
                    .enumerate()
                    .map(|(k, v)| v * w.get(k, c))
                    .sum::<f64>()
                    + b[c]
            })
            .collect()
    }

    /// Row-at-a-time reference transformer.
    fn reference(bb: &Backbone, s: &ParamStore, x: &Tensor) -> Vec<Vec<f64>> {
        let d = bb.width();
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row_slice(r).to_vec()).collect();
        let pe = sinusoidal(rows.len(), d);
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += pe.get(r, c);
            }
        }
        let zeros = vec![0.0; 4 * d];
        for b in &bb.blocks {
            let val = |id| s.value(id).data().to_vec();
            let h: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| layer_norm(r, &val(b.ln1.gain), &val(b.ln1.bias)))
                .collect();
            let q: Vec<Vec<f64>> = h
                .iter()
                .map(|r| affine(r, s.value(b.attn.wq), &zeros))
                .collect();
            let k: Vec<Vec<f64>> = h
                .iter()
                .map(|r| affine(r, s.value(b.attn.wk), &zeros))
                .collect();
            let v: Vec<Vec<f64>> = h
                .iter()
                .map(|r| affine(r, s.value(b.attn.wv), &zeros))
                .collect();
            let dh = d / b.attn.heads;
            for (i, row) in rows.iter_mut().enumerate() {
                let mut cat = vec![0.0; d];
                for head in 0..b.attn.heads {
                    let cols = head * dh..(head + 1) * dh;
                    let logits: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            cols.clone().map(|c| q[i][c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols {
                        cat[c] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[c]).sum();
                    }
                }
                let o = affine(
                    &cat,
                    s.value(b.attn.out.weight),
                    &val(b.attn.out.bias.unwrap()),
                );
                row.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
            for row in rows.iter_mut() {
                let h = layer_norm(row, &val(b.ln2.gain), &val(b.ln2.bias));
                let f = affine(
                    &h,
                    s.value(b.ff.first.weight),
                    &val(b.ff.first.bias.unwrap()),
                );
                let f: Vec<f64> = f.into_iter().map(|v| v.max(0.0)).collect();
                let f = affine(
                    &f,
                    s.value(b.ff.second.weight),
                    &val(b.ff.second.bias.unwrap()),
                );
                row.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
        }
        rows
    }

    #[test]
    fn matches_reference_stack() {
        let mut s = ParamStore::new();
        let bb = Backbone::init(&mut s, &small(2, true)).unwrap();
        let x = random(6, 8, 4);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = bb.forward(&mut tape, &s, xv).unwrap();
        let expect = reference(&bb, &s, &x);
        for (r, row) in expect.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((tape.value(y).get(r, c) - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn head_unit_weight_reads_hidden_value() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RegressionHead::new(&mut s, 1, 1, &mut rng).unwrap();
        s.get_mut(head.linear.weight).value = Tensor::scalar(1.0);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[vec![9.0], vec![4.5]]).unwrap());
        let out = head.forward(&mut tape, &s, h, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[4.5]);
    }

    #[test]
    fn head_output_has_one_value_per_variable() {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RegressionHead::new(&mut s, 3, 8, &mut rng).unwrap();
        for m in [0, 2, 7] {
            let mut tape = Tape::new();
            let h = tape.constant(random(m + 3, 8, m as u64));
            let out = head.forward(&mut tape, &s, h, m).unwrap();
            assert_eq!(tape.value(out).shape(), &[1, 3]);
        }
    }
}
