//! Long-format events CSV ingestion.
//!
//! Expected header (column names remappable through [`ColumnMap`]):
//! `patient_id,stay_id,age,variable,hour,value,icu_transfers`. `hour` may be
//! fractional; it is the time since admission in hours.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    clean_outliers, default_variables, derive_seed, impute, index_of, resample_hourly,
    validate_specs, Cohort, Event, Exclusion, Label, PatientRecord, VariableSpec, SPAN_HOURS,
};
use crate::clinscore::{detect_onset, DEFAULT_ONSET_THRESHOLD, DEFAULT_SOFA_LOOKBACK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub patient_id: String,
    pub stay_id: String,
    pub age: String,
    pub variable: String,
    pub hour: String,
    pub value: String,
    /// Optional; stays without it count as a single ICU admission.
    pub icu_transfers: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            patient_id: "patient_id".into(),
            stay_id: "stay_id".into(),
            age: "age".into(),
            variable: "variable".into(),
            hour: "hour".into(),
            value: "value".into(),
            icu_transfers: "icu_transfers".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub columns: ColumnMap,
    pub variables: Vec<VariableSpec>,
    /// Optional `stay_id,note` CSV with note summaries.
    pub notes: Option<PathBuf>,
    pub onset_threshold: u32,
    /// Seeds the pseudo-anchors of negative stays.
    pub seed: u64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            columns: ColumnMap::default(),
            variables: default_variables(),
            notes: None,
            onset_threshold: DEFAULT_ONSET_THRESHOLD,
            seed: 0,
        }
    }
}

impl CsvSchema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: CsvSchema = serde_json::from_str(&text)?;
        validate_specs(&schema.variables)?;
        Ok(schema)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number in the file, header is line 1.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub row_errors: Vec<RowError>,
    /// Unknown variable name → number of rows skipped.
    pub unknown_variables: BTreeMap<String, usize>,
    pub outliers_blanked: usize,
    pub exclusions: Vec<Exclusion>,
}

struct Stay {
    patient_id: String,
    age: u32,
    icu_transfers: u32,
    events: Vec<Event>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn load_notes(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let headers = rdr.headers()?.clone();
    let (s, n) = (column(&headers, "stay_id")?, column(&headers, "note")?);
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row?;
        out.insert(row[s].to_string(), row[n].to_string());
    }
    Ok(out)
}

/// Reads a long-format events file into a cohort of right-aligned records.
///
/// Per stay: events are resampled hourly, implausible values blanked, then
/// imputed. A stay whose SOFA reaches the onset threshold is positive with
/// its onset as anchor; otherwise it is negative and gets a seeded
/// pseudo-anchor. Stays without 30 hours of history before the anchor are
/// excluded with cause `insufficient_history`.
pub fn ingest_csv(events_path: &Path, schema: &CsvSchema) -> Result<(Cohort, IngestReport)> {
    validate_specs(&schema.variables)?;
    let specs = &schema.variables;
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(events_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(events_path, io),
            other => Error::Data(format!("{}: {other:?}", events_path.display())),
        })?;
    let headers = rdr.headers()?.clone();
    let cols = &schema.columns;
    let c_patient = column(&headers, &cols.patient_id)?;
    let c_stay = column(&headers, &cols.stay_id)?;
    let c_age = column(&headers, &cols.age)?;
    let c_var = column(&headers, &cols.variable)?;
    let c_hour = column(&headers, &cols.hour)?;
    let c_value = column(&headers, &cols.value)?;
    let c_transfers = column(&headers, &cols.icu_transfers).ok();

    let mut report = IngestReport::default();
    let mut stays: BTreeMap<String, Stay> = BTreeMap::new();
    for (order, row) in rdr.records().enumerate() {
        let line = order as u64 + 2;
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.row_errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
        let parsed = (|| -> std::result::Result<(usize, f64, f64, u32, u32), String> {
            let name = field(c_var);
            let hour: f64 = field(c_hour)
                .parse()
                .map_err(|_| format!("non-numeric hour `{}`", field(c_hour)))?;
            let value: f64 = field(c_value)
                .parse()
                .map_err(|_| format!("non-numeric value `{}`", field(c_value)))?;
            let age: u32 = field(c_age)
                .parse()
                .map_err(|_| format!("bad age `{}`", field(c_age)))?;
            let transfers = match c_transfers.map(field) {
                None | Some("") => 0,
                Some(t) => t.parse().map_err(|_| format!("bad icu_transfers `{t}`"))?,
            };
            if !hour.is_finite() || !value.is_finite() {
                return Err("non-finite hour or value".into());
            }
            if field(c_stay).is_empty() || field(c_patient).is_empty() {
                return Err("empty patient or stay id".into());
            }
            let var = index_of(specs, name).ok_or_else(|| format!("unknown variable `{name}`"))?;
            Ok((var, hour, value, age, transfers))
        })();
        match parsed {
            Ok((var, time, value, age, transfers)) => {
                let stay = stays
                    .entry(field(c_stay).to_string())
                    .or_insert_with(|| Stay {
                        patient_id: field(c_patient).to_string(),
                        age,
                        icu_transfers: transfers,
                        events: Vec::new(),
                    });
                stay.icu_transfers = stay.icu_transfers.max(transfers);
                stay.events.push(Event {
                    var,
                    time,
                    value,
                    order,
                });
            }
            Err(msg) if msg.starts_with("unknown variable") => {
                *report
                    .unknown_variables
                    .entry(field(c_var).to_string())
                    .or_default() += 1;
            }
            Err(message) => report.row_errors.push(RowError { line, message }),
        }
    }

    let notes = match &schema.notes {
        Some(p) => load_notes(p)?,
        None => BTreeMap::new(),
    };

    let mut records = Vec::new();
    for (index, (stay_id, stay)) in stays.into_iter().enumerate() {
        let first = stay
            .events
            .iter()
            .map(|e| e.time.floor() as i64)
            .min()
            .unwrap_or(0);
        let last = stay
            .events
            .iter()
            .map(|e| e.time.floor() as i64)
            .max()
            .unwrap_or(0);
        let mut raw = resample_hourly(
            &stay.events,
            specs.len(),
            first,
            (last - first + 1) as usize,
        );
        report.outliers_blanked += clean_outliers(&mut raw, specs);
        let full = impute(&raw, specs);
        let onset = detect_onset(&full, specs, schema.onset_threshold, DEFAULT_SOFA_LOOKBACK);
        let earliest = first + SPAN_HOURS;
        let (label, anchor) = match onset {
            Some(h) if h >= earliest => (Label::Positive, h),
            Some(_) => {
                report.exclusions.push(Exclusion {
                    stay_id,
                    cause: "insufficient_history".into(),
                });
                continue;
            }
            None if last >= earliest => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(schema.seed, index as u64));
                (Label::Negative, rng.random_range(earliest..=last))
            }
            None => {
                report.exclusions.push(Exclusion {
                    stay_id,
                    cause: "insufficient_history".into(),
                });
                continue;
            }
        };
        records.push(PatientRecord {
            patient_id: stay.patient_id,
            note_summary: notes.get(&stay_id).cloned().unwrap_or_default(),
            stay_id,
            age_years: stay.age,
            label,
            onset_hour: label.is_positive().then_some(anchor),
            anchor_hour: anchor,
            icu_transfers: stay.icu_transfers,
            vitals: full.hours(anchor - SPAN_HOURS, anchor)?,
        });
    }
    Ok((Cohort::new(records, specs.clone()), report))
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn write_events(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "patient_id,stay_id,age,variable,hour,value,icu_transfers"
        )
        .unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    fn stay_rows(patient: &str, stay: &str, hours: i64, hr: f64) -> String {
        let mut s = String::new();
        for h in 0..hours {
            for (var, v) in [("hr", hr), ("sbp", 120.0), ("rr", 16.0)] {
                s.push_str(&format!("{patient},{stay},60,{var},{h},{v},0\n"));
            }
        }
        s
    }

    #[test]
    fn groups_two_stays() {
        let f = write_events(&(stay_rows("p1", "s1", 40, 80.0) + &stay_rows("p2", "s2", 40, 85.0)));
        let (c, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(c.records.len(), 2);
        assert!(report.row_errors.is_empty());
        assert!(c
            .records
            .iter()
            .all(|r| r.vitals.n_hours() == 31 && !r.vitals.has_missing()));
    }

    #[test]
    fn bad_value_is_reported_with_line() {
        let body = stay_rows("p1", "s1", 40, 80.0) + "p1,s1,60,hr,3,abc,0\n";
        let f = write_events(&body);
        let (_, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(report.row_errors.len(), 1);
        assert_eq!(report.row_errors[0].line, 40 * 3 + 2);
        assert!(report.row_errors[0].message.contains("abc"));
    }

    #[test]
    fn unknown_variables_are_counted_and_skipped() {
        let body = stay_rows("p1", "s1", 40, 80.0) + "p1,s1,60,ldl,3,100,0\np1,s1,60,ldl,4,100,0\n";
        let f = write_events(&body);
        let (_, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(report.unknown_variables["ldl"], 2);
    }

    #[test]
    fn later_duplicate_row_wins() {
        let mut body = String::new();
        for h in 0..40 {
            body.push_str(&format!("p1,s1,60,hr,{h},80,0\n"));
        }
        body.push_str("p1,s1,60,hr,35,99,0\n");
        let f = write_events(&body);
        let (c, _) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        let r = &c.records[0];
        if let Some(col) = r.vitals.col_of_hour(35) {
            assert_eq!(r.vitals.values[0][col], 99.0);
        }
    }

    #[test]
    fn missing_column_is_hard_failure() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "patient_id,stay_id,variable,hour,value").unwrap();
        let err = ingest_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "age"));
    }

    #[test]
    fn short_stays_are_excluded() {
        let f = write_events(&stay_rows("p1", "s1", 10, 80.0));
        let (c, report) = ingest_csv(f.path(), &CsvSchema::default()).unwrap();
        assert!(c.records.is_empty());
        assert_eq!(report.exclusions[0].cause, "insufficient_history");
    }
}
