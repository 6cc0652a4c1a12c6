//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries probed per parameter, spread evenly over the tensor.
    pub max_entries_per_param: usize,
    /// Denominator floor so that near-zero gradients compare absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: 16,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of `loss_fn` against central differences for
/// every trainable parameter in `store`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    store: &mut ParamStore,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.backward(loss)?.params();
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss_fn(&mut tape, store)?;
        Ok(tape.scalar(l))
    };

    let mut entries = Vec::new();
    for (id, analytic) in grads {
        let len = analytic.len();
        let stride = (len / cfg.max_entries_per_param.max(1)).max(1);
        for index in (0..len).step_by(stride).take(cfg.max_entries_per_param) {
            let orig = store.value(id).data()[index];
            store.get_mut(id).value.data_mut()[index] = orig + cfg.step;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[index] = orig - cfg.step;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            entries.push(GradCheckEntry {
                param: store.get(id).name.clone(),
                index,
                analytic: analytic[index],
                numeric,
                rel_error: relative_error(analytic[index], numeric, cfg.floor),
            });
        }
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tolerance,
        max_rel_error,
        entries,
    })
}
