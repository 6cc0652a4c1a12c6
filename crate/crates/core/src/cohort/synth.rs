//! Synthetic ICU cohorts with configurable deterioration dynamics.
//!
//! Every stay is simulated over `stay_hours`. Positives get a convex
//! severity ramp pulling affected variables toward their `septic_value`;
//! the anchor is then the first hour the rolling SOFA reaches the onset
//! threshold, exactly as labeling would find it on real data. Negatives stay
//! at their normal-range midpoint plus noise and receive a uniform
//! pseudo-anchor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    default_variables, derive_seed, validate_specs, Cohort, Deterioration, Label, PatientRecord,
    VariableSpec, VitalsMatrix, SPAN_HOURS,
};
use crate::clinscore::{detect_onset, DEFAULT_ONSET_THRESHOLD, DEFAULT_SOFA_LOOKBACK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Independent Gaussian noise around the trajectory.
    #[default]
    White,
    /// Gaussian random walk started at the trajectory.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    pub variables: Vec<VariableSpec>,
    /// Noise standard deviation as a fraction of half the normal-range width.
    pub noise: f64,
    pub noise_model: NoiseModel,
    pub stay_hours: i64,
    /// Earliest and latest hour the deterioration ramp may begin.
    pub ramp_start: [i64; 2],
    /// Hours from ramp start to full severity.
    pub ramp_hours: [f64; 2],
    /// Exponent of the ramp; > 1 accelerates toward onset.
    pub curvature: [f64; 2],
    /// Per-variable chance a positive patient's variable deteriorates.
    pub affect_probability: f64,
    /// Chance a note summary matches the patient's label.
    pub note_signal: f64,
    /// Restricts deterioration to these variables when set.
    pub informative_variables: Option<Vec<String>>,
    pub onset_threshold: u32,
    pub max_attempts: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_positive: 100,
            n_negative: 100,
            variables: default_variables(),
            noise: 0.15,
            noise_model: NoiseModel::White,
            stay_hours: 96,
            ramp_start: [5, 40],
            ramp_hours: [36.0, 72.0],
            curvature: [1.0, 2.0],
            affect_probability: 0.7,
            note_signal: 0.8,
            informative_variables: None,
            onset_threshold: DEFAULT_ONSET_THRESHOLD,
            max_attempts: 500,
        }
    }
}

const SOFA_INPUTS: [&str; 7] = [
    "pao2",
    "platelets",
    "bilirubin",
    "mbp",
    "gcs",
    "creatinine",
    "urine_output",
];

const INFECTION_NOTES: [&str; 4] = [
    "admitted with community acquired pneumonia productive cough and fever started on antibiotics",
    "admitted from ward with suspected urinary tract infection rigors and confusion blood cultures drawn",
    "after abdominal surgery with wound drainage and fever suspected intra abdominal infection",
    "admitted with cellulitis spreading erythema and chills started on antibiotics",
];

const NEUTRAL_NOTES: [&str; 4] = [
    "admitted for monitoring after elective hip replacement recovery uncomplicated",
    "admitted with chest pain myocardial infarction ruled out stable observation",
    "admitted for monitoring after elective spine surgery no complications",
    "admitted with diabetic ketoacidosis treated with insulin infusion improving",
];

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(Error::Config(format!(
                "n_positive and n_negative must be > 0 (got {} and {})",
                self.n_positive, self.n_negative
            )));
        }
        validate_specs(&self.variables)?;
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if self.stay_hours <= SPAN_HOURS {
            return Err(Error::Config(format!(
                "stay_hours must exceed {SPAN_HOURS}"
            )));
        }
        let ordered = |a: f64, b: f64| a <= b;
        if !ordered(self.ramp_start[0] as f64, self.ramp_start[1] as f64)
            || !ordered(self.ramp_hours[0], self.ramp_hours[1])
            || !ordered(self.curvature[0], self.curvature[1])
            || self.ramp_hours[0] <= 0.0
            || self.curvature[0] <= 0.0
        {
            return Err(Error::Config(
                "ramp ranges must be ordered and positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.affect_probability)
            || !(0.0..=1.0).contains(&self.note_signal)
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if let Some(names) = &self.informative_variables {
            for n in names {
                if !self.variables.iter().any(|s| &s.name == n) {
                    return Err(Error::Config(format!("unknown informative variable `{n}`")));
                }
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

/// Midpoint trajectory plus noise, `n_vars × hours`.
fn baseline(config: &CohortConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let hours = config.stay_hours as usize;
    config
        .variables
        .iter()
        .map(|s| {
            let mid = s.normal_midpoint();
            let sigma = config.noise * 0.5 * s.normal_width();
            if sigma == 0.0 {
                return vec![mid; hours];
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            match config.noise_model {
                NoiseModel::White => (0..hours).map(|_| mid + normal.sample(rng)).collect(),
                NoiseModel::RandomWalk => {
                    let mut level = mid;
                    (0..hours)
                        .map(|_| {
                            level += normal.sample(rng);
                            level
                        })
                        .collect()
                }
            }
        })
        .collect()
}

fn clamp_plausible(values: &mut [Vec<f64>], specs: &[VariableSpec]) {
    for (row, s) in values.iter_mut().zip(specs) {
        for v in row.iter_mut() {
            *v = v.clamp(s.plausible_range[0], s.plausible_range[1]);
        }
    }
}

fn note(label: Label, age: u32, config: &CohortConfig, rng: &mut ChaCha8Rng) -> String {
    let matches = rng.random_bool(config.note_signal);
    let infection = label.is_positive() == matches;
    let pool = if infection {
        &INFECTION_NOTES
    } else {
        &NEUTRAL_NOTES
    };
    let text = pool[rng.random_range(0..pool.len())];
    let sex = if rng.random_bool(0.5) {
        "male"
    } else {
        "female"
    };
    format!("patient aged {age} {sex} {text}")
}

fn positive_trajectory(config: &CohortConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let specs = &config.variables;
    let eligible = |s: &VariableSpec| {
        s.deterioration != Deterioration::None
            && config
                .informative_variables
                .as_ref()
                .is_none_or(|names| names.contains(&s.name))
    };
    let mut weights: Vec<f64> = specs
        .iter()
        .map(|s| {
            if eligible(s) && rng.random_bool(config.affect_probability) {
                rng.random_range(0.6..1.2)
            } else {
                0.0
            }
        })
        .collect();
    let sofa_idx: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| SOFA_INPUTS.contains(&s.name.as_str()) && eligible(s))
        .map(|(i, _)| i)
        .collect();
    while sofa_idx.len() >= 2 && sofa_idx.iter().filter(|&&i| weights[i] > 0.0).count() < 2 {
        let pick = sofa_idx[rng.random_range(0..sofa_idx.len())];
        if weights[pick] == 0.0 {
            weights[pick] = rng.random_range(0.6..1.2);
        }
    }

    let start = rng.random_range(config.ramp_start[0]..=config.ramp_start[1]) as f64;
    let length = uniform(rng, config.ramp_hours);
    let gamma = uniform(rng, config.curvature);
    let mut values = baseline(config, rng);
    for ((row, s), w) in values.iter_mut().zip(specs).zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        let delta = (s.septic_value - s.normal_midpoint()) * w;
        for (t, v) in row.iter_mut().enumerate() {
            let x = (t as f64 - start) / length;
            if x > 0.0 {
                *v += delta * x.powf(gamma).min(1.5);
            }
        }
    }
    values
}

fn crop(values: Vec<Vec<f64>>, anchor: i64) -> Result<VitalsMatrix> {
    VitalsMatrix::new(values, 0)?.hours(anchor - SPAN_HOURS, anchor)
}

fn synth_record(
    config: &CohortConfig,
    index: usize,
    label: Label,
    seed: u64,
) -> Result<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, index as u64));
    let specs = &config.variables;
    let age = rng.random_range(18..=90);
    for _ in 0..config.max_attempts {
        let mut values = match label {
            Label::Positive => positive_trajectory(config, &mut rng),
            Label::Negative => baseline(config, &mut rng),
        };
        clamp_plausible(&mut values, specs);
        let full = VitalsMatrix::new(values, 0)?;
        let onset = detect_onset(&full, specs, config.onset_threshold, DEFAULT_SOFA_LOOKBACK);
        let anchor = match (label, onset) {
            (Label::Positive, Some(h)) if h >= SPAN_HOURS => h,
            (Label::Negative, None) => rng.random_range(SPAN_HOURS..config.stay_hours),
            _ => continue,
        };
        return Ok(PatientRecord {
            patient_id: format!("P{index:05}"),
            stay_id: format!("S{index:05}"),
            age_years: age,
            label,
            onset_hour: label.is_positive().then_some(anchor),
            anchor_hour: anchor,
            icu_transfers: 0,
            vitals: crop(full.values, anchor)?,
            note_summary: note(label, age, config, &mut rng),
        });
    }
    Err(Error::Config(format!(
        "could not synthesize a {label:?} record within {} attempts; check ramp and noise settings",
        config.max_attempts
    )))
}

/// Builds `n_positive` positives followed by `n_negative` negatives.
/// Each record draws from its own seed derived from `seed` and its index.
pub fn generate_synthetic(config: &CohortConfig, seed: u64) -> Result<Cohort> {
    config.validate()?;
    let records = (0..config.n_positive + config.n_negative)
        .map(|i| {
            let label = if i < config.n_positive {
                Label::Positive
            } else {
                Label::Negative
            };
            synth_record(config, i, label, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort::new(records, config.variables.clone()))
}
