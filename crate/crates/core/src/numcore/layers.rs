use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// softmax(q kᵀ / √d) v for single-head `q[m,d]`, `k[n,d]`, `v[n,e]`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = tape.value(q).cols();
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// `x[m,n] -> [1,n]`.
pub fn mean_pool(tape: &mut Tape, x: Var) -> Var {
    tape.mean_rows(x)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Fan-in scaled normal init, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight =
            store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, trainable, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), trainable)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        linear(tape, x, w, b)
    }
}

/// `x W + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `mlp2(x) = σ(x W1 + b1) W2 + b2`.
pub fn mlp2(
    tape: &mut Tape,
    x: Var,
    (w1, b1): (Var, Var),
    (w2, b2): (Var, Var),
    act: Activation,
) -> Result<Var> {
    let h = linear(tape, x, w1, Some(b1))?;
    let h = act.apply(tape, h);
    linear(tape, h, w2, Some(b2))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, trainable: bool) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(
                format!("{name}.g"),
                Tensor::filled(&[1, width], 1.0),
                trainable,
            )?,
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, width]), trainable)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm_rows(x, 1e-5);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp2 {
            first: Linear::new(
                store,
                &format!("{name}.1"),
                input,
                hidden,
                true,
                trainable,
                rng,
            )?,
            second: Linear::new(
                store,
                &format!("{name}.2"),
                hidden,
                output,
                true,
                trainable,
                rng,
            )?,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = self.activation.apply(tape, h);
        self.second.forward(tape, store, h)
    }
}

/// Multi-head attention. Head `k` uses columns `k·dₕ .. (k+1)·dₕ` of the
/// projection matrices, which is the same as separate per-head `W_k`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        query_width: usize,
        kv_width: usize,
        width: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        let sq = 1.0 / (query_width.max(1) as f64).sqrt();
        let skv = 1.0 / (kv_width.max(1) as f64).sqrt();
        Ok(MultiHeadAttention {
            wq: store.add_normal(
                format!("{name}.wq"),
                &[query_width, width],
                sq,
                trainable,
                rng,
            )?,
            wk: store.add_normal(
                format!("{name}.wk"),
                &[kv_width, width],
                skv,
                trainable,
                rng,
            )?,
            wv: store.add_normal(
                format!("{name}.wv"),
                &[kv_width, width],
                skv,
                trainable,
                rng,
            )?,
            out: Linear::new(
                store,
                &format!("{name}.wo"),
                width,
                width,
                true,
                trainable,
                rng,
            )?,
            heads,
            width,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let heads = self.attend_heads(tape, q, k, v)?;
        self.out.forward(tape, store, heads)
    }

    /// Per-head attention on already-projected q, k, v; heads concatenated.
    pub fn attend_heads(&self, tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
        let dh = self.width / self.heads;
        if self.heads == 1 {
            return attention(tape, q, k, v);
        }
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            outs.push(attention(tape, qh, kh, vh)?);
        }
        tape.concat_cols(&outs)
    }
}
