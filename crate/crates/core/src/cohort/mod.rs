//! Patient cohorts: synthetic generation, CSV ingestion, hourly resampling,
//! imputation, right-alignment, exclusions and train/test/validation splits.

mod archive;
mod ingest;
mod matrix;
mod spec;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use archive::{load_cohort, read_record_csv, save_cohort, write_record_csv, COHORT_FORMAT};
pub use ingest::{ingest_csv, ColumnMap, CsvSchema, IngestReport, RowError};
pub use matrix::{clean_outliers, impute, resample_hourly, Event, VitalsMatrix};
pub use spec::{
    default_variables, index_of, load_specs, validate_specs, Deterioration, Direction,
    VariableSpec, WarnThreshold,
};
pub use synth::{generate_synthetic, CohortConfig, NoiseModel};

use crate::error::{Error, Result};

/// Hours of history before the anchor; records hold `SPAN_HOURS + 1` columns.
pub const SPAN_HOURS: i64 = 30;
pub const DEFAULT_OFFSETS: [i64; 5] = [24, 12, 8, 6, 4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    pub fn as_f64(self) -> f64 {
        if self.is_positive() {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Validation];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub stay_id: String,
    pub age_years: u32,
    pub label: Label,
    /// Onset hour for positives.
    pub onset_hour: Option<i64>,
    /// Right-alignment anchor: the onset for positives, a pseudo-anchor for
    /// negatives.
    pub anchor_hour: i64,
    pub icu_transfers: u32,
    pub vitals: VitalsMatrix,
    pub note_summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub variable_specs: Vec<VariableSpec>,
    /// stay id → split.
    pub split_assignment: BTreeMap<String, Split>,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, variable_specs: Vec<VariableSpec>) -> Self {
        Cohort {
            records,
            variable_specs,
            split_assignment: BTreeMap::new(),
        }
    }

    pub fn split_of(&self, record: &PatientRecord) -> Option<Split> {
        self.split_assignment.get(&record.stay_id).copied()
    }

    pub fn records_in(&self, split: Split) -> Vec<&PatientRecord> {
        self.records
            .iter()
            .filter(|r| self.split_of(r) == Some(split))
            .collect()
    }

    pub fn n_positive(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.label.is_positive())
            .count()
    }
}

/// History visible at evaluation hour `anchor − offset_k`: hours
/// `[anchor − span, anchor − offset_k]`.
pub fn align_right(record: &PatientRecord, span_hours: i64, offset_k: i64) -> Result<VitalsMatrix> {
    if offset_k < 0 || offset_k > span_hours {
        return Err(Error::Data(format!(
            "offset {offset_k} outside 0..={span_hours} for stay {}",
            record.stay_id
        )));
    }
    let first = record.anchor_hour - span_hours;
    if first < record.vitals.start_hour {
        return Err(Error::Data(format!(
            "insufficient history for stay {}: needs hour {first}, record starts at {}",
            record.stay_id, record.vitals.start_hour
        )));
    }
    record.vitals.hours(first, record.anchor_hour - offset_k)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub stay_id: String,
    pub cause: String,
}

/// Drops under-age records, stays with more than one ICU transfer, and
/// records whose pre-imputation missing fraction exceeds `max_missing_rate`.
pub fn filter_exclusions(cohort: Cohort, max_missing_rate: f64) -> (Cohort, Vec<Exclusion>) {
    let mut excluded = Vec::new();
    let Cohort {
        records,
        variable_specs,
        mut split_assignment,
    } = cohort;
    let kept = records
        .into_iter()
        .filter(|r| {
            let cause = if r.age_years < 18 {
                Some("age".to_string())
            } else if r.icu_transfers > 1 {
                Some("icu_transfer".to_string())
            } else if r.vitals.missing_rate() > max_missing_rate {
                Some(format!("missing_rate {:.3}", r.vitals.missing_rate()))
            } else {
                None
            };
            match cause {
                Some(cause) => {
                    split_assignment.remove(&r.stay_id);
                    excluded.push(Exclusion {
                        stay_id: r.stay_id.clone(),
                        cause,
                    });
                    false
                }
                None => true,
            }
        })
        .collect();
    (
        Cohort {
            records: kept,
            variable_specs,
            split_assignment,
        },
        excluded,
    )
}

/// Largest-remainder apportionment of `n` into `ratios`.
fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let sum: f64 = ratios.iter().sum();
    let ideal: Vec<f64> = ratios.iter().map(|r| n as f64 * r / sum).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified split by label at patient level; every stay of a patient lands
/// in the same split. Overall sizes follow `ratios` by largest remainder and
/// each (label, split) cell is within one patient of its ideal share.
pub fn split(mut cohort: Cohort, ratios: [f64; 3], seed: u64) -> Result<Cohort> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("bad split ratios {ratios:?}")));
    }
    let mut patients: BTreeMap<&str, Label> = BTreeMap::new();
    for r in &cohort.records {
        let e = patients.entry(r.patient_id.as_str()).or_insert(r.label);
        *e = (*e).max(r.label);
    }
    let mut by_label: BTreeMap<Label, Vec<&str>> = BTreeMap::new();
    for (p, l) in &patients {
        by_label.entry(*l).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in by_label.values_mut() {
        group.shuffle(&mut rng);
    }

    let totals = apportion(patients.len(), &ratios);
    let sum: f64 = ratios.iter().sum();
    let labels: Vec<Label> = by_label.keys().copied().collect();
    let mut cell = vec![[0usize; 3]; labels.len()];
    let mut fracs = Vec::new();
    for (li, l) in labels.iter().enumerate() {
        let n = by_label[l].len() as f64;
        for s in 0..3 {
            let ideal = n * ratios[s] / sum;
            cell[li][s] = ideal.floor() as usize;
            fracs.push((ideal - ideal.floor(), li, s));
        }
    }
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let class_left = |cell: &Vec<[usize; 3]>, li: usize| {
        by_label[&labels[li]].len() - cell[li].iter().sum::<usize>()
    };
    let split_left =
        |cell: &Vec<[usize; 3]>, s: usize| totals[s] - cell.iter().map(|c| c[s]).sum::<usize>();
    for &(_, li, s) in &fracs {
        if class_left(&cell, li) > 0 && split_left(&cell, s) > 0 {
            cell[li][s] += 1;
        }
    }
    for li in 0..labels.len() {
        for s in 0..3 {
            while class_left(&cell, li) > 0 && split_left(&cell, s) > 0 {
                cell[li][s] += 1;
            }
        }
    }

    let mut patient_split: BTreeMap<String, Split> = BTreeMap::new();
    for (li, l) in labels.iter().enumerate() {
        let mut it = by_label[l].iter();
        for (s, split) in Split::ALL.iter().enumerate() {
            for p in it.by_ref().take(cell[li][s]) {
                patient_split.insert((*p).to_string(), *split);
            }
        }
    }
    cohort.split_assignment = cohort
        .records
        .iter()
        .map(|r| (r.stay_id.clone(), patient_split[&r.patient_id]))
        .collect();
    Ok(cohort)
}

/// splitmix64 step; derives independent per-record seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: usize, label: Label, anchor: i64) -> PatientRecord {
        let values = vec![(0..=SPAN_HOURS).map(|h| h as f64).collect::<Vec<_>>()];
        PatientRecord {
            patient_id: format!("p{id}"),
            stay_id: format!("s{id}"),
            age_years: 60,
            label,
            onset_hour: label.is_positive().then_some(anchor),
            anchor_hour: anchor,
            icu_transfers: 0,
            vitals: VitalsMatrix::new(values, anchor - SPAN_HOURS).unwrap(),
            note_summary: String::new(),
        }
    }

    fn cohort(n: usize, n_pos: usize) -> Cohort {
        let records = (0..n)
            .map(|i| {
                record(
                    i,
                    if i < n_pos {
                        Label::Positive
                    } else {
                        Label::Negative
                    },
                    100,
                )
            })
            .collect();
        Cohort::new(records, default_variables()[..1].to_vec())
    }

    #[test]
    fn align_right_offset_4() {
        let w = align_right(&record(0, Label::Positive, 100), SPAN_HOURS, 4).unwrap();
        assert_eq!(w.start_hour, 70);
        assert_eq!(w.end_hour(), 96);
        assert_eq!(w.n_hours(), 27);
    }

    #[test]
    fn align_right_boundaries() {
        let r = record(0, Label::Positive, 100);
        assert_eq!(align_right(&r, SPAN_HOURS, 0).unwrap().n_hours(), 31);
        assert_eq!(align_right(&r, SPAN_HOURS, 30).unwrap().n_hours(), 1);
        assert!(align_right(&r, SPAN_HOURS, 31).is_err());
    }

    #[test]
    fn align_right_reports_short_history() {
        let mut r = record(0, Label::Positive, 100);
        r.vitals = r.vitals.hours(75, 100).unwrap();
        assert!(align_right(&r, SPAN_HOURS, 4)
            .unwrap_err()
            .to_string()
            .contains("insufficient history"));
    }

    #[test]
    fn split_ten_records_seven_two_one() {
        let c = split(cohort(10, 5), [0.7, 0.2, 0.1], 3).unwrap();
        let count = |s| c.split_assignment.values().filter(|v| **v == s).count();
        assert_eq!(
            (
                count(Split::Train),
                count(Split::Test),
                count(Split::Validation)
            ),
            (7, 2, 1)
        );
    }

    #[test]
    fn split_is_deterministic() {
        let a = split(cohort(40, 13), [0.7, 0.2, 0.1], 9).unwrap();
        let b = split(cohort(40, 13), [0.7, 0.2, 0.1], 9).unwrap();
        assert_eq!(a.split_assignment, b.split_assignment);
    }

    #[test]
    fn split_is_stratified() {
        for n in [10, 20, 50, 100, 101] {
            let c = split(cohort(n, n / 2), [0.7, 0.2, 0.1], n as u64).unwrap();
            for s in Split::ALL {
                let members = c.records_in(s);
                let pos = members.iter().filter(|r| r.label.is_positive()).count() as f64;
                let half = members.len() as f64 / 2.0;
                assert!(
                    (pos - half).abs() <= 1.0,
                    "n={n} split={s:?} pos={pos} size={}",
                    members.len()
                );
            }
        }
    }

    #[test]
    fn patient_stays_share_a_split() {
        let mut c = cohort(30, 10);
        for (i, r) in c.records.iter_mut().enumerate() {
            r.patient_id = format!("p{}", i / 3);
        }
        let c = split(c, [0.7, 0.2, 0.1], 1).unwrap();
        for r in &c.records {
            for o in &c.records {
                if r.patient_id == o.patient_id {
                    assert_eq!(c.split_of(r), c.split_of(o));
                }
            }
        }
    }

    #[test]
    fn exclusions_report_causes() {
        let mut c = cohort(4, 2);
        c.records[0].age_years = 17;
        c.records[1].icu_transfers = 2;
        for row in &mut c.records[2].vitals.imputed_mask {
            for (i, f) in row.iter_mut().enumerate() {
                *f = i % 10 != 0;
            }
        }
        let (kept, report) = filter_exclusions(c, 0.5);
        assert_eq!(kept.records.len(), 1);
        assert_eq!(report[0].cause, "age");
        assert_eq!(report[1].cause, "icu_transfer");
        assert!(report[2].cause.starts_with("missing_rate"));
    }
}
