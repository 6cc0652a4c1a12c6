//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string; errors come back as a thrown string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use sepsis_core::clinscore::{score_at, Criterion, HourlyObservation, DEFAULT_SOFA_LOOKBACK};
use sepsis_core::cohort::{default_variables, generate_synthetic, index_of, CohortConfig};
use sepsis_core::postproc::{apply, review, RangeTable, RuleAgent};
use sepsis_core::reprogram::{patch, PatchConfig};

type Out = std::result::Result<String, String>;

fn json<T: Serialize>(v: &T) -> Out {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

fn js(r: Out) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[derive(Serialize)]
struct Trajectory {
    label: &'static str,
    start_hour: i64,
    anchor_hour: i64,
    onset_hour: Option<i64>,
    hours: Vec<i64>,
    scores: Vec<(&'static str, Vec<u32>)>,
    vitals: Vec<(String, Vec<f64>)>,
}

/// One synthetic stay and its hourly criterion totals.
pub fn trajectory(seed: u64, positive: bool) -> Out {
    let cfg = CohortConfig {
        n_positive: 1,
        n_negative: 1,
        ..CohortConfig::default()
    };
    let cohort = generate_synthetic(&cfg, seed).map_err(|e| e.to_string())?;
    let specs = &cohort.variable_specs;
    let r = cohort
        .records
        .iter()
        .find(|r| r.label.is_positive() == positive)
        .ok_or("generator returned no record of that label")?;
    let m = &r.vitals;
    let series = HourlyObservation::series(m, specs);
    let mut scores = Vec::new();
    for c in Criterion::ALL {
        let totals = (0..series.len())
            .map(|col| score_at(&series, col, c, DEFAULT_SOFA_LOOKBACK).map(|s| s.total))
            .collect::<sepsis_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        scores.push((c.name(), totals));
    }
    let vitals = ["hr", "mbp", "rr", "lactate"]
        .iter()
        .filter_map(|&n| index_of(specs, n).map(|i| (n.to_string(), m.values[i].clone())))
        .collect();
    json(&Trajectory {
        label: if positive { "positive" } else { "negative" },
        start_hour: m.start_hour,
        anchor_hour: r.anchor_hour,
        onset_hour: r.onset_hour,
        hours: (0..m.n_hours() as i64).map(|c| m.start_hour + c).collect(),
        scores,
        vitals,
    })
}

#[wasm_bindgen]
pub fn score_trajectory(seed: u64, positive: bool) -> Result<String, JsValue> {
    js(trajectory(seed, positive))
}

/// Start index of every patch over a series of length `t`.
pub fn layout(t: usize, patch_len: usize, stride: usize, plus_two: bool) -> Out {
    let cfg = PatchConfig {
        patch_len,
        stride,
        plus_two,
    };
    let series: Vec<f64> = (0..t).map(|i| i as f64).collect();
    let patches = patch(&series, &cfg).map_err(|e| e.to_string())?;
    // Values are the indices; padding repeats the last one.
    let idx: Vec<Vec<usize>> = patches
        .iter()
        .map(|p| p.iter().map(|&v| v as usize).collect())
        .collect();
    json(&idx)
}

#[wasm_bindgen]
pub fn patch_layout(t: usize, patch_len: usize, stride: usize, plus_two: bool) -> Result<String, JsValue> {
    js(layout(t, patch_len, stride, plus_two))
}

#[derive(Serialize)]
struct EnvelopeView {
    variable: String,
    reference: (f64, f64),
    envelope: (f64, f64),
    action: serde_json::Value,
    corrected: f64,
}

/// Post-processing of one forecast value; other variables sit at mid-range.
pub fn envelope(variable: &str, last: f64, pred: f64, hours: f64, scale: f64) -> Out {
    let specs = default_variables();
    let i = index_of(&specs, variable).ok_or_else(|| format!("unknown variable `{variable}`"))?;
    let ranges = RangeTable::from_specs(&specs);
    let mut lasts: Vec<f64> = ranges.entries.iter().map(|e| 0.5 * (e.lo + e.hi)).collect();
    let mut preds = lasts.clone();
    lasts[i] = last;
    // Non-finite input from the page is treated as a spike.
    preds[i] = if pred.is_finite() { pred } else { f64::INFINITY };
    let r = review(&preds, &lasts, &ranges, &RuleAgent).map_err(|e| e.to_string())?;
    let mut scales = vec![1.0; specs.len()];
    scales[i] = scale;
    let x = apply(&preds, &r.corrections, &scales, &lasts, &ranges, hours).map_err(|e| e.to_string())?;
    json(&EnvelopeView {
        variable: variable.to_string(),
        reference: ranges.reference(i, last),
        envelope: ranges.envelope(i, last, hours),
        action: serde_json::to_value(r.corrections[i].action).map_err(|e| e.to_string())?,
        corrected: x[i],
    })
}

#[wasm_bindgen]
pub fn envelope_demo(variable: &str, last: f64, pred: f64, hours: f64, scale: f64) -> Result<String, JsValue> {
    js(envelope(variable, last, pred, hours, scale))
}

#[wasm_bindgen]
pub fn variables() -> Result<String, JsValue> {
    js(json(&default_variables()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_has_all_criteria() {
        let v: serde_json::Value = serde_json::from_str(&trajectory(1, true).unwrap()).unwrap();
        let hours = v["hours"].as_array().unwrap().len();
        assert_eq!(v["scores"].as_array().unwrap().len(), 4);
        assert_eq!(v["scores"][0][1].as_array().unwrap().len(), hours);
        assert!(v["onset_hour"].is_i64());
    }

    #[test]
    fn layout_counts_patches() {
        let v: Vec<Vec<usize>> = serde_json::from_str(&layout(30, 8, 4, true).unwrap()).unwrap();
        assert_eq!(v.len(), (30 - 8) / 4 + 2);
        assert_eq!(v[0], (0..8).collect::<Vec<_>>());
        assert!(layout(4, 8, 4, true).is_err());
    }

    #[test]
    fn spike_stays_in_envelope() {
        let v: serde_json::Value = serde_json::from_str(&envelope("hr", 110.0, 1e9, 2.0, 1.0).unwrap()).unwrap();
        let x = v["corrected"].as_f64().unwrap();
        assert!(x <= v["envelope"][1].as_f64().unwrap());
        assert!(envelope("nope", 1.0, 1.0, 1.0, 1.0).is_err());
    }
}
