//! Rule-based clinical scores: SOFA, SIRS, qSOFA and MEWS.
//!
//! Thresholds follow the standard published definitions. SOFA omits the
//! vasopressor tiers of the cardiovascular component (no medication data),
//! so that component tops out at 1. Missing inputs score 0 and are listed in
//! [`ScoreBreakdown::missing`].

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::cohort::{VariableSpec, VitalsMatrix};
use crate::error::{Error, Result};

pub const TABLE_VERSION: u32 = 1;
pub const DEFAULT_SOFA_LOOKBACK: usize = 24;
pub const DEFAULT_ONSET_THRESHOLD: u32 = 2;

const MEWS_TABLE: &str = include_str!("../../data/mews.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Sofa,
    Sirs,
    Qsofa,
    Mews,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Sofa,
        Criterion::Sirs,
        Criterion::Qsofa,
        Criterion::Mews,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Sofa => "sofa",
            Criterion::Sirs => "sirs",
            Criterion::Qsofa => "qsofa",
            Criterion::Mews => "mews",
        }
    }

    /// Total at or above which the criterion is considered positive.
    pub fn alarm_threshold(self) -> u32 {
        match self {
            Criterion::Sofa | Criterion::Sirs | Criterion::Qsofa => 2,
            Criterion::Mews => mews_table().alarm,
        }
    }

    pub fn component_max(self) -> u8 {
        match self {
            Criterion::Sofa => 4,
            Criterion::Sirs | Criterion::Qsofa => 1,
            Criterion::Mews => 3,
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sofa" => Ok(Criterion::Sofa),
            "sirs" => Ok(Criterion::Sirs),
            "qsofa" => Ok(Criterion::Qsofa),
            "mews" => Ok(Criterion::Mews),
            other => Err(Error::Config(format!("unknown criterion `{other}`"))),
        }
    }
}

/// Level of consciousness on the AVPU scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Avpu {
    Alert = 0,
    Voice = 1,
    Pain = 2,
    Unresponsive = 3,
}

impl Avpu {
    /// GCS 15 alert, 13–14 voice, 9–12 pain, below 9 unresponsive.
    pub fn from_gcs(gcs: f64) -> Avpu {
        match round_gcs(gcs) {
            g if g >= 15 => Avpu::Alert,
            13 | 14 => Avpu::Voice,
            9..=12 => Avpu::Pain,
            _ => Avpu::Unresponsive,
        }
    }
}

/// GCS is an integer scale; continuous inputs are rounded before lookup.
pub fn round_gcs(gcs: f64) -> i64 {
    gcs.round() as i64
}

/// One hour of scoring inputs. Urine output is mL/h.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HourlyObservation {
    pub map: Option<f64>,
    pub platelets: Option<f64>,
    pub bilirubin: Option<f64>,
    pub gcs: Option<f64>,
    pub creatinine: Option<f64>,
    pub urine_output: Option<f64>,
    pub pf_ratio: Option<f64>,
    pub temp: Option<f64>,
    pub hr: Option<f64>,
    pub rr: Option<f64>,
    pub sbp: Option<f64>,
    pub wbc: Option<f64>,
    pub paco2: Option<f64>,
    pub bands: Option<f64>,
    pub avpu: Option<Avpu>,
}

impl HourlyObservation {
    /// Reads column `col` of a matrix whose rows follow `specs`, matching
    /// variables by name. AVPU is derived from GCS.
    pub fn from_column(m: &VitalsMatrix, specs: &[VariableSpec], col: usize) -> Self {
        let get = |name: &str| {
            specs
                .iter()
                .position(|s| s.name == name)
                .map(|i| m.values[i][col])
                .filter(|v| v.is_finite())
        };
        let pf_ratio = match (get("pao2"), get("fio2")) {
            (Some(p), Some(f)) if f > 0.0 => Some(p / f),
            _ => None,
        };
        let gcs = get("gcs");
        HourlyObservation {
            map: get("mbp"),
            platelets: get("platelets"),
            bilirubin: get("bilirubin"),
            gcs,
            creatinine: get("creatinine"),
            urine_output: get("urine_output"),
            pf_ratio,
            temp: get("temp"),
            hr: get("hr"),
            rr: get("rr"),
            sbp: get("sbp"),
            wbc: get("wbc"),
            paco2: get("paco2"),
            bands: get("bands"),
            avpu: gcs.map(Avpu::from_gcs),
        }
    }

    pub fn series(m: &VitalsMatrix, specs: &[VariableSpec]) -> Vec<Self> {
        (0..m.n_hours())
            .map(|c| Self::from_column(m, specs, c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Subscore {
    pub name: &'static str,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScoreBreakdown {
    pub criterion: Criterion,
    pub components: Vec<Subscore>,
    pub total: u32,
    /// Components whose inputs were absent (scored 0).
    pub missing: Vec<&'static str>,
}

impl ScoreBreakdown {
    fn build(criterion: Criterion, parts: Vec<(&'static str, Option<u8>)>) -> Self {
        let missing = parts
            .iter()
            .filter(|(_, s)| s.is_none())
            .map(|(n, _)| *n)
            .collect();
        let components: Vec<Subscore> = parts
            .into_iter()
            .map(|(name, s)| Subscore {
                name,
                score: s.unwrap_or(0),
            })
            .collect();
        let total = components.iter().map(|c| u32::from(c.score)).sum();
        ScoreBreakdown {
            criterion,
            components,
            total,
            missing,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn alarm(&self) -> bool {
        self.total >= self.criterion.alarm_threshold()
    }

    pub fn component(&self, name: &str) -> Option<u8> {
        self.components
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.score)
    }
}

pub mod sofa_table {
    pub fn respiration(pf_ratio: f64) -> u8 {
        match pf_ratio {
            r if r < 100.0 => 4,
            r if r < 200.0 => 3,
            r if r < 300.0 => 2,
            r if r < 400.0 => 1,
            _ => 0,
        }
    }

    /// Platelets in 10³/µL.
    pub fn coagulation(platelets: f64) -> u8 {
        match platelets {
            p if p < 20.0 => 4,
            p if p < 50.0 => 3,
            p if p < 100.0 => 2,
            p if p < 150.0 => 1,
            _ => 0,
        }
    }

    /// Bilirubin in mg/dL.
    pub fn liver(bilirubin: f64) -> u8 {
        match bilirubin {
            b if b >= 12.0 => 4,
            b if b >= 6.0 => 3,
            b if b >= 2.0 => 2,
            b if b >= 1.2 => 1,
            _ => 0,
        }
    }

    pub fn cardiovascular(map: f64) -> u8 {
        u8::from(map < 70.0)
    }

    pub fn cns(gcs: f64) -> u8 {
        match super::round_gcs(gcs) {
            g if g >= 15 => 0,
            13 | 14 => 1,
            10..=12 => 2,
            6..=9 => 3,
            _ => 4,
        }
    }

    /// Creatinine in mg/dL.
    pub fn renal_creatinine(creatinine: f64) -> u8 {
        match creatinine {
            c if c >= 5.0 => 4,
            c if c >= 3.5 => 3,
            c if c >= 2.0 => 2,
            c if c >= 1.2 => 1,
            _ => 0,
        }
    }

    /// Urine output in mL/day.
    pub fn renal_urine(ml_per_day: f64) -> u8 {
        match ml_per_day {
            u if u < 200.0 => 4,
            u if u < 500.0 => 3,
            _ => 0,
        }
    }
}

fn fold_opt(values: impl Iterator<Item = Option<f64>>, worst: fn(f64, f64) -> f64) -> Option<f64> {
    values.flatten().reduce(worst)
}

/// SOFA from the worst value of each input over the trailing `lookback`
/// hours of `window`. Daily urine is estimated as the worst hourly rate × 24.
pub fn sofa(window: &[HourlyObservation], lookback: usize) -> Result<ScoreBreakdown> {
    if window.is_empty() || lookback == 0 {
        return Err(Error::EmptyWindow);
    }
    let w = &window[window.len().saturating_sub(lookback)..];
    let min = |f: fn(&HourlyObservation) -> Option<f64>| fold_opt(w.iter().map(f), f64::min);
    let max = |f: fn(&HourlyObservation) -> Option<f64>| fold_opt(w.iter().map(f), f64::max);

    let renal = match (max(|o| o.creatinine), min(|o| o.urine_output)) {
        (None, None) => None,
        (c, u) => Some(
            c.map_or(0, sofa_table::renal_creatinine)
                .max(u.map_or(0, |u| sofa_table::renal_urine(u * 24.0))),
        ),
    };
    Ok(ScoreBreakdown::build(
        Criterion::Sofa,
        vec![
            (
                "respiration",
                min(|o| o.pf_ratio).map(sofa_table::respiration),
            ),
            (
                "coagulation",
                min(|o| o.platelets).map(sofa_table::coagulation),
            ),
            ("liver", max(|o| o.bilirubin).map(sofa_table::liver)),
            (
                "cardiovascular",
                min(|o| o.map).map(sofa_table::cardiovascular),
            ),
            ("cns", min(|o| o.gcs).map(sofa_table::cns)),
            ("renal", renal),
        ],
    ))
}

/// Temperature >38 or <36 °C; HR >90; RR >20 or PaCO2 <32 mmHg;
/// WBC >12 or <4 ×10³/µL or bands >10 %.
pub fn sirs(obs: &HourlyObservation) -> ScoreBreakdown {
    let either = |a: Option<bool>, b: Option<bool>| match (a, b) {
        (None, None) => None,
        (a, b) => Some(u8::from(a.unwrap_or(false) || b.unwrap_or(false))),
    };
    let wbc = either(
        obs.wbc.map(|w| !(4.0..=12.0).contains(&w)),
        obs.bands.map(|b| b > 10.0),
    );
    ScoreBreakdown::build(
        Criterion::Sirs,
        vec![
            (
                "temperature",
                obs.temp.map(|t| u8::from(!(36.0..=38.0).contains(&t))),
            ),
            ("heart_rate", obs.hr.map(|h| u8::from(h > 90.0))),
            (
                "respiratory",
                either(obs.rr.map(|r| r > 20.0), obs.paco2.map(|p| p < 32.0)),
            ),
            ("white_cells", wbc),
        ],
    )
}

/// RR ≥22; SBP ≤100 mmHg; GCS <15.
pub fn qsofa(obs: &HourlyObservation) -> ScoreBreakdown {
    ScoreBreakdown::build(
        Criterion::Qsofa,
        vec![
            ("respiratory_rate", obs.rr.map(|r| u8::from(r >= 22.0))),
            ("systolic_bp", obs.sbp.map(|s| u8::from(s <= 100.0))),
            ("mentation", obs.gcs.map(|g| u8::from(round_gcs(g) < 15))),
        ],
    )
}

#[derive(Debug, Clone, Deserialize)]
struct MewsBand {
    below: Option<f64>,
    score: u8,
}

#[derive(Debug, Clone, Deserialize)]
struct MewsComponent {
    input: String,
    bands: Vec<MewsBand>,
}

#[derive(Debug, Clone, Deserialize)]
struct MewsTable {
    #[allow(dead_code)]
    version: u32,
    alarm: u32,
    components: Vec<MewsComponent>,
}

fn mews_table() -> &'static MewsTable {
    static TABLE: OnceLock<MewsTable> = OnceLock::new();
    TABLE.get_or_init(|| serde_json::from_str(MEWS_TABLE).expect("embedded MEWS table parses"))
}

fn mews_band(component: &MewsComponent, value: f64) -> u8 {
    component
        .bands
        .iter()
        .find(|b| b.below.is_none_or(|limit| value < limit))
        .map_or(0, |b| b.score)
}

/// Subscore of one MEWS input (`sbp`, `hr`, `rr`, `temp`, `avpu`).
pub fn mews_component(input: &str, value: f64) -> Option<u8> {
    mews_table()
        .components
        .iter()
        .find(|c| c.input == input)
        .map(|c| mews_band(c, value))
}

pub fn mews(obs: &HourlyObservation) -> ScoreBreakdown {
    let parts = mews_table()
        .components
        .iter()
        .map(|c| {
            let value = match c.input.as_str() {
                "sbp" => obs.sbp,
                "hr" => obs.hr,
                "rr" => obs.rr,
                "temp" => obs.temp,
                "avpu" => obs.avpu.map(|a| a as u8 as f64),
                _ => None,
            };
            let name: &'static str = match c.input.as_str() {
                "sbp" => "systolic_bp",
                "hr" => "heart_rate",
                "rr" => "respiratory_rate",
                "temp" => "temperature",
                _ => "avpu",
            };
            (name, value.map(|v| mews_band(c, v)))
        })
        .collect();
    ScoreBreakdown::build(Criterion::Mews, parts)
}

/// Score of `criterion` at column `col`. SOFA looks back over the preceding
/// columns; the others read the single hour.
pub fn score_at(
    series: &[HourlyObservation],
    col: usize,
    criterion: Criterion,
    lookback: usize,
) -> Result<ScoreBreakdown> {
    let obs = series.get(col).ok_or(Error::EmptyWindow)?;
    Ok(match criterion {
        Criterion::Sofa => sofa(&series[..=col], lookback)?,
        Criterion::Sirs => sirs(obs),
        Criterion::Qsofa => qsofa(obs),
        Criterion::Mews => mews(obs),
    })
}

/// First absolute hour whose rolling SOFA total reaches `threshold`.
pub fn detect_onset(
    m: &VitalsMatrix,
    specs: &[VariableSpec],
    threshold: u32,
    lookback: usize,
) -> Option<i64> {
    let series = HourlyObservation::series(m, specs);
    (0..series.len())
        .find(|&c| sofa(&series[..=c], lookback).is_ok_and(|s| s.total >= threshold))
        .map(|c| m.start_hour + c as i64)
}

/// Criterion totals at each evaluation hour `anchor − k`, usable as a
/// ranking score for ROC analysis.
pub fn criterion_score_series(
    m: &VitalsMatrix,
    specs: &[VariableSpec],
    anchor: i64,
    criterion: Criterion,
    offsets: &[i64],
) -> Result<Vec<(i64, u32)>> {
    let series = HourlyObservation::series(m, specs);
    offsets
        .iter()
        .map(|&k| {
            let col = m.col_of_hour(anchor - k).ok_or_else(|| {
                Error::Data(format!("evaluation hour {} outside record", anchor - k))
            })?;
            Ok((
                k,
                score_at(&series, col, criterion, DEFAULT_SOFA_LOOKBACK)?.total,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn normal() -> HourlyObservation {
        HourlyObservation {
            map: Some(85.0),
            platelets: Some(250.0),
            bilirubin: Some(0.7),
            gcs: Some(15.0),
            creatinine: Some(0.9),
            urine_output: Some(70.0),
            pf_ratio: Some(450.0),
            temp: Some(37.0),
            hr: Some(80.0),
            rr: Some(14.0),
            sbp: Some(120.0),
            wbc: Some(7.0),
            paco2: Some(40.0),
            bands: Some(2.0),
            avpu: Some(Avpu::Alert),
        }
    }

    #[test]
    fn sofa_platelets_90_scores_coagulation_2() {
        let mut o = normal();
        o.platelets = Some(90.0);
        let s = sofa(&[normal(), o], 24).unwrap();
        assert_eq!(s.component("coagulation"), Some(2));
        assert_eq!(s.total, 2);
    }

    #[test]
    fn sofa_gcs_14_scores_cns_1() {
        let mut o = normal();
        o.gcs = Some(14.0);
        assert_eq!(sofa(&[o], 24).unwrap().component("cns"), Some(1));
    }

    #[test]
    fn sofa_all_normal_is_zero() {
        let s = sofa(&[normal(); 5], 24).unwrap();
        assert_eq!(s.total, 0);
        assert!(s.is_complete());
    }

    #[test]
    fn sofa_empty_window_is_error() {
        assert!(matches!(sofa(&[], 24), Err(Error::EmptyWindow)));
    }

    #[test]
    fn sofa_lookback_forgets_old_hours() {
        let mut bad = normal();
        bad.platelets = Some(40.0);
        let mut w = vec![bad];
        w.extend(std::iter::repeat_n(normal(), 24));
        assert_eq!(sofa(&w, 24).unwrap().total, 0);
        assert_eq!(sofa(&w, 25).unwrap().total, 3);
    }

    #[test]
    fn sofa_missing_inputs_score_zero_and_are_flagged() {
        let s = sofa(&[HourlyObservation::default()], 24).unwrap();
        assert_eq!(s.total, 0);
        assert_eq!(s.missing.len(), 6);
    }

    #[test]
    fn qsofa_rr_and_sbp() {
        let o = HourlyObservation {
            rr: Some(24.0),
            sbp: Some(95.0),
            gcs: Some(15.0),
            ..Default::default()
        };
        assert_eq!(qsofa(&o).total, 2);
        assert!(qsofa(&o).alarm());
    }

    #[test]
    fn sirs_all_four() {
        let o = HourlyObservation {
            temp: Some(38.5),
            hr: Some(95.0),
            rr: Some(22.0),
            wbc: Some(13.0),
            ..Default::default()
        };
        assert_eq!(sirs(&o).total, 4);
    }

    #[test]
    fn mews_row_by_row() {
        let o = HourlyObservation {
            hr: Some(135.0),
            rr: Some(10.0),
            sbp: Some(75.0),
            temp: Some(36.5),
            avpu: Some(Avpu::Alert),
            ..Default::default()
        };
        let s = mews(&o);
        assert_eq!(s.component("heart_rate"), Some(3));
        assert_eq!(s.component("respiratory_rate"), Some(0));
        assert_eq!(s.component("systolic_bp"), Some(2));
        assert_eq!(s.component("temperature"), Some(0));
        assert_eq!(s.component("avpu"), Some(0));
        assert_eq!(s.total, 5);
        assert!(s.alarm());
    }

    #[test]
    fn avpu_from_gcs() {
        assert_eq!(Avpu::from_gcs(15.0), Avpu::Alert);
        assert_eq!(Avpu::from_gcs(13.0), Avpu::Voice);
        assert_eq!(Avpu::from_gcs(9.0), Avpu::Pain);
        assert_eq!(Avpu::from_gcs(8.0), Avpu::Unresponsive);
    }
}
