//! Spatiotemporal feature extraction: per-variable patching, text-prototype
//! reprogramming attention, cross-variable attention and temporal pooling.
//!
//! Patch rows are stacked patch-major: row `p·N + i` is patch `p` of
//! variable `i`, so the `N` rows of one patch index are contiguous.

mod norm;
mod patch;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use norm::InstanceNorm;
pub use patch::{patch, patch_count, patch_index, PatchConfig};

use crate::error::{Error, Result};
use crate::numcore::{Linear, MultiHeadAttention, ParamId, ParamStore, Tape, Tensor, Var};

/// Longest window a patch can span (31 hourly columns plus one appended).
pub const MAX_PATCH_LEN: usize = 32;
pub const MAX_PATCHES: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprogramConfig {
    pub patch: PatchConfig,
    /// Number of text prototypes V′.
    pub prototypes: usize,
    pub heads: usize,
    /// Adds a learned per-variable identity vector to patch embeddings.
    pub variable_embedding: bool,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        ReprogramConfig {
            patch: PatchConfig::default(),
            prototypes: 32,
            heads: 2,
            variable_embedding: true,
        }
    }
}

/// Feature tokens of one window.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `[P·N, D]`, patch-major.
    pub per_patch: Var,
    /// `[N, D]`, mean over patches.
    pub pooled: Var,
    pub n_patches: usize,
}

#[derive(Debug, Clone)]
pub struct Reprogrammer {
    pub probe: ParamId,
    pub embed: Linear,
    pub position: ParamId,
    pub variable: Option<ParamId>,
    pub reprogram: MultiHeadAttention,
    pub cross: MultiHeadAttention,
    pub project: Linear,
    pub n_vars: usize,
    pub width: usize,
}

/// `E′ = probe · E`.
pub fn build_prototypes(tape: &mut Tape, probe: Var, vocab_embeddings: Var) -> Result<Var> {
    tape.matmul(probe, vocab_embeddings)
}

/// Row `i` of the result is the mean over patches of variable `i`.
pub fn pool(tape: &mut Tape, per_patch: Var, n_vars: usize) -> Result<Var> {
    let rows = tape.value(per_patch).rows();
    if n_vars == 0 || rows % n_vars != 0 {
        return Err(Error::Shape {
            op: "pool",
            left: tape.value(per_patch).shape().to_vec(),
            right: vec![n_vars],
        });
    }
    let p = rows / n_vars;
    let mut m = Tensor::zeros(&[n_vars, rows]);
    for k in 0..p {
        for i in 0..n_vars {
            m.set(i, k * n_vars + i, 1.0 / p as f64);
        }
    }
    let m = tape.constant(m);
    tape.matmul(m, per_patch)
}

/// Self-attention over the `N` variable rows at each patch index, with a
/// residual connection.
pub fn cross_variable_attention(
    tape: &mut Tape,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    h: Var,
    n_vars: usize,
) -> Result<Var> {
    let rows = tape.value(h).rows();
    if n_vars == 0 || rows % n_vars != 0 {
        return Err(Error::Shape {
            op: "cross_variable_attention",
            left: tape.value(h).shape().to_vec(),
            right: vec![n_vars],
        });
    }
    let mut blocks = Vec::with_capacity(rows / n_vars);
    for k in 0..rows / n_vars {
        let block = tape.slice_rows(h, k * n_vars, n_vars)?;
        let mixed = attn.forward(tape, store, block, block)?;
        blocks.push(tape.add(block, mixed)?);
    }
    tape.concat_rows(&blocks)
}

impl Reprogrammer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &ReprogramConfig,
        n_vars: usize,
        width: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.prototypes == 0 || cfg.prototypes * 4 > vocab_size {
            return Err(Error::Config(format!(
                "prototype count {} must be in 1..={} (a quarter of the vocabulary)",
                cfg.prototypes,
                vocab_size / 4
            )));
        }
        let probe_std = 1.0 / (vocab_size as f64).sqrt();
        Ok(Reprogrammer {
            probe: store.add_normal(
                "reprog.probe",
                &[cfg.prototypes, vocab_size],
                probe_std,
                true,
                rng,
            )?,
            embed: Linear::new(store, "reprog.embed", MAX_PATCH_LEN, width, true, true, rng)?,
            position: store.add_normal("reprog.pos", &[MAX_PATCHES, width], 0.1, true, rng)?,
            variable: if cfg.variable_embedding {
                Some(store.add_normal("reprog.var", &[n_vars, width], 0.5, true, rng)?)
            } else {
                None
            },
            reprogram: MultiHeadAttention::new(
                store,
                "reprog.attn",
                width,
                width,
                width,
                cfg.heads,
                true,
                rng,
            )?,
            cross: MultiHeadAttention::new(
                store,
                "reprog.cross",
                width,
                width,
                width,
                cfg.heads,
                true,
                rng,
            )?,
            project: Linear::new(store, "reprog.proj", width, width, true, true, rng)?,
            n_vars,
            width,
        })
    }

    pub fn prototypes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vocab_embeddings: Var,
    ) -> Result<Var> {
        let probe = tape.param(store, self.probe);
        build_prototypes(tape, probe, vocab_embeddings)
    }

    /// Patch rows `[P·N, L_p]` gathered from a normalized `[N, T]` input, so
    /// gradients reach the input cells.
    pub fn patch_rows(&self, tape: &mut Tape, x: Var, cfg: &PatchConfig) -> Result<(Var, usize)> {
        let (n, t) = tape.value(x).dims2();
        if n != self.n_vars {
            return Err(Error::Shape {
                op: "patch_rows",
                left: vec![n, t],
                right: vec![self.n_vars],
            });
        }
        let p = patch_count(t, cfg)?;
        if p > MAX_PATCHES || cfg.patch_len > MAX_PATCH_LEN {
            return Err(Error::Config(format!(
                "{p} patches of length {} exceed the embedding capacity",
                cfg.patch_len
            )));
        }
        let mut idx = Vec::with_capacity(p * n * cfg.patch_len);
        for k in 0..p {
            for i in 0..n {
                idx.extend((0..cfg.patch_len).map(|j| i * t + patch_index(t, cfg, k, j)));
            }
        }
        let flat = tape.reshape(x, n * t, 1)?;
        let cells = tape.gather_rows(flat, &idx)?;
        Ok((tape.reshape(cells, p * n, cfg.patch_len)?, p))
    }

    /// Linear patch embedding plus patch-position and variable vectors.
    pub fn embed_patches(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        rows: Var,
        n_patches: usize,
    ) -> Result<Var> {
        let lp = tape.value(rows).cols();
        let w_full = tape.param(store, self.embed.weight);
        let w = tape.slice_rows(w_full, 0, lp)?;
        let mut e = tape.matmul(rows, w)?;
        if let Some(b) = self.embed.bias {
            let b = tape.param(store, b);
            e = tape.add_row(e, b)?;
        }
        let n = self.n_vars;
        let pos_idx: Vec<usize> = (0..n_patches)
            .flat_map(|k| std::iter::repeat_n(k, n))
            .collect();
        let pos = tape.param(store, self.position);
        let pos = tape.gather_rows(pos, &pos_idx)?;
        e = tape.add(e, pos)?;
        if let Some(v) = self.variable {
            let var_idx: Vec<usize> = (0..n_patches).flat_map(|_| 0..n).collect();
            let v = tape.param(store, v);
            let v = tape.gather_rows(v, &var_idx)?;
            e = tape.add(e, v)?;
        }
        Ok(e)
    }

    /// Queries from patch embeddings, keys and values from prototypes.
    pub fn reprogram_heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        patches: Var,
        protos: Var,
    ) -> Result<Var> {
        self.reprogram.forward(tape, store, patches, protos)
    }

    /// Normalized window `[N, T]` → feature tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        protos: Var,
        cfg: &PatchConfig,
    ) -> Result<Features> {
        let (rows, p) = self.patch_rows(tape, x, cfg)?;
        let emb = self.embed_patches(tape, store, rows, p)?;
        let h = self.reprogram_heads(tape, store, emb, protos)?;
        let mixed = cross_variable_attention(tape, store, &self.cross, h, self.n_vars)?;
        let per_patch = self.project.forward(tape, store, mixed)?;
        let pooled = pool(tape, per_patch, self.n_vars)?;
        if !tape.value(pooled).is_finite() {
            return Err(Error::Divergence("non-finite feature tensor".into()));
        }
        Ok(Features {
            per_patch,
            pooled,
            n_patches: p,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn model(n_vars: usize, prototypes: usize, seed: u64) -> (ParamStore, Reprogrammer) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = ReprogramConfig {
            prototypes,
            ..Default::default()
        };
        let r = Reprogrammer::new(&mut store, &cfg, n_vars, 8, 64, &mut rng).unwrap();
        (store, r)
    }

    #[test]
    fn averaging_probe_of_identical_rows() {
        let mut tape = Tape::new();
        let probe = tape.constant(Tensor::filled(&[3, 2], 0.5));
        let e = tape
            .constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![1.0, -2.0, 3.0]]).unwrap());
        let p = build_prototypes(&mut tape, probe, e).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(p).row_slice(r), &[1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn quarter_vocabulary_prototypes() {
        let (store, r) = model(2, 16, 1);
        assert_eq!(store.value(r.probe).shape(), &[16, 64]);
        let mut store = ParamStore::new();
        let cfg = ReprogramConfig {
            prototypes: 17,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Reprogrammer::new(&mut store, &cfg, 2, 8, 64, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_init() {
        let (a, _) = model(3, 8, 5);
        let (b, _) = model(3, 8, 5);
        assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn single_prototype_gives_its_value_projection() {
        let (store, r) = model(2, 1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let q = tape.constant(random(5, 8, &mut rng));
        let proto = random(1, 8, &mut rng);
        let kv = tape.constant(proto.clone());
        let y = r.reprogram_heads(&mut tape, &store, q, kv).unwrap();
        let v = proto.matmul(store.value(r.reprogram.wv)).unwrap();
        let mut expect = v.matmul(store.value(r.reprogram.out.weight)).unwrap();
        let b = store.value(r.reprogram.out.bias.unwrap());
        for (e, bb) in expect.data_mut().iter_mut().zip(b.data()) {
            *e += bb;
        }
        for row in 0..5 {
            for (a, e) in tape.value(y).row_slice(row).iter().zip(expect.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_attend_uniformly() {
        let (store, r) = model(2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let protos = random(4, 8, &mut rng);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[3, 8]));
        let kv = tape.constant(protos.clone());
        let wv = tape.param(&store, r.reprogram.wv);
        let v = tape.matmul(kv, wv).unwrap();
        let wq = tape.param(&store, r.reprogram.wq);
        let wk = tape.param(&store, r.reprogram.wk);
        let qq = tape.matmul(q, wq).unwrap();
        let kk = tape.matmul(kv, wk).unwrap();
        let heads = r.reprogram.attend_heads(&mut tape, qq, kk, v).unwrap();
        let mean = tape.mean_rows(v);
        for row in 0..3 {
            for (a, m) in tape
                .value(heads)
                .row_slice(row)
                .iter()
                .zip(tape.value(mean).data())
            {
                assert!((a - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reprogrammed_rows_stay_in_value_hull() {
        let (store, r) = model(3, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let q = tape.constant(random(6, 8, &mut rng));
        let kv = tape.constant(random(8, 8, &mut rng));
        let wq = tape.param(&store, r.reprogram.wq);
        let wk = tape.param(&store, r.reprogram.wk);
        let wv = tape.param(&store, r.reprogram.wv);
        let (qq, kk, vv) = (
            tape.matmul(q, wq).unwrap(),
            tape.matmul(kv, wk).unwrap(),
            tape.matmul(kv, wv).unwrap(),
        );
        let out = r.reprogram.attend_heads(&mut tape, qq, kk, vv).unwrap();
        let v = tape.value(vv).clone();
        for row in 0..6 {
            for c in 0..8 {
                let col: Vec<f64> = (0..8).map(|k| v.get(k, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let x = tape.value(out).get(row, c);
                assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn one_variable_cross_attention_is_value_path() {
        let (store, r) = model(1, 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(3, 8, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = cross_variable_attention(&mut tape, &store, &r.cross, hv, 1).unwrap();
        let v = h.matmul(store.value(r.cross.wv)).unwrap();
        let o = v.matmul(store.value(r.cross.out.weight)).unwrap();
        let b = store.value(r.cross.out.bias.unwrap());
        for row in 0..3 {
            for c in 0..8 {
                let expect = h.get(row, c) + o.get(row, c) + b.get(0, c);
                assert!((tape.value(out).get(row, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_variables_get_identical_rows() {
        let (store, r) = model(2, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = random(1, 8, &mut rng);
        let h = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let out = cross_variable_attention(&mut tape, &store, &r.cross, hv, 2).unwrap();
        assert_eq!(tape.value(out).row_slice(0), tape.value(out).row_slice(1));
    }

    /// Naive per-patch, per-head loops.
    fn reference_cross(
        h: &Tensor,
        store: &ParamStore,
        attn: &MultiHeadAttention,
        n: usize,
    ) -> Tensor {
        let (wq, wk, wv) = (
            store.value(attn.wq),
            store.value(attn.wk),
            store.value(attn.wv),
        );
        let (wo, bo) = (
            store.value(attn.out.weight),
            store.value(attn.out.bias.unwrap()),
        );
        let d = h.cols();
        let dh = d / attn.heads;
        let mut out = h.clone();
        for p in 0..h.rows() / n {
            let rows: Vec<usize> = (p * n..(p + 1) * n).collect();
            let proj = |w: &Tensor, r: usize, c: usize| {
                (0..d).map(|k| h.get(r, k) * w.get(k, c)).sum::<f64>()
            };
            for &r in &rows {
                let mut concat = vec![0.0; d];
                for head in 0..attn.heads {
                    let cols = head * dh..(head + 1) * dh;
                    let logits: Vec<f64> = rows
                        .iter()
                        .map(|&s| {
                            cols.clone()
                                .map(|c| proj(wq, r, c) * proj(wk, s, c))
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for c in cols {
                        concat[c] = rows
                            .iter()
                            .zip(&ex)
                            .map(|(&s, e)| e / z * proj(wv, s, c))
                            .sum();
                    }
                }
                for c in 0..d {
                    let y: f64 =
                        (0..d).map(|k| concat[k] * wo.get(k, c)).sum::<f64>() + bo.get(0, c);
                    out.set(r, c, h.get(r, c) + y);
                }
            }
        }
        out
    }

    #[test]
    fn cross_attention_matches_reference() {
        let (store, r) = model(3, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random(6, 8, &mut rng);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = cross_variable_attention(&mut tape, &store, &r.cross, hv, 3).unwrap();
        let expect = reference_cross(&h, &store, &r.cross, 3);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn cross_attention_is_permutation_equivariant() {
        let (store, r) = model(3, 4, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(6, 8, &mut rng);
        let perm = [2usize, 0, 1];
        let idx: Vec<usize> = (0..2)
            .flat_map(|p| perm.iter().map(move |&i| p * 3 + i))
            .collect();
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let hp = tape.gather_rows(hv, &idx).unwrap();
        let a = cross_variable_attention(&mut tape, &store, &r.cross, hv, 3).unwrap();
        let b = cross_variable_attention(&mut tape, &store, &r.cross, hp, 3).unwrap();
        let a_perm = tape.gather_rows(a, &idx).unwrap();
        assert!(tape.value(a_perm).max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn pooling_is_mean_over_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(4 * 3, 5, &mut rng);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let pooled = pool(&mut tape, zv, 3).unwrap();
        for i in 0..3 {
            for c in 0..5 {
                let mean = (0..4).map(|p| z.get(p * 3 + i, c)).sum::<f64>() / 4.0;
                assert!((tape.value(pooled).get(i, c) - mean).abs() < 1e-12);
            }
        }
        let one = tape.constant(z.clone());
        let single = pool(&mut tape, one, 12).unwrap();
        assert_eq!(tape.value(single), &z);
    }

    #[test]
    fn patch_rows_match_series_slices() {
        let (_, r) = model(2, 4, 13);
        let x = Tensor::matrix(2, 7, (0..14).map(f64::from).collect()).unwrap();
        let cfg = PatchConfig {
            patch_len: 3,
            stride: 2,
            plus_two: true,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (rows, p) = r.patch_rows(&mut tape, xv, &cfg).unwrap();
        assert_eq!(p, 4);
        for k in 0..p {
            for i in 0..2 {
                let expect = &patch(&x.row_slice(i).to_vec(), &cfg).unwrap()[k];
                assert_eq!(tape.value(rows).row_slice(k * 2 + i), expect.as_slice());
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (store, r) = model(3, 8, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(3, 12, &mut rng);
        let e = random(64, 8, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let ev = tape.constant(e.clone());
            let protos = r.prototypes(&mut tape, &store, ev).unwrap();
            let xv = tape.constant(x.clone());
            let f = r
                .forward(&mut tape, &store, xv, protos, &PatchConfig::default())
                .unwrap();
            (
                tape.value(f.per_patch).clone(),
                tape.value(f.pooled).clone(),
                f.n_patches,
            )
        };
        let (a, pa, p) = run();
        let (b, pb, _) = run();
        assert_eq!(p, 4);
        assert_eq!(a.shape(), &[12, 8]);
        assert_eq!(pa.shape(), &[3, 8]);
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }
}
