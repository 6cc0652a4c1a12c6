//! On-disk cohort archive: `cohort.json` manifest plus one directory per
//! split holding a `variable,<hour>,...` CSV matrix per record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{index_of, Cohort, Label, PatientRecord, Split, VariableSpec, VitalsMatrix};
use crate::error::{Error, Result};

pub const COHORT_FORMAT: &str = "sepsis-cohort";
const COHORT_VERSION: u32 = 1;
const MANIFEST: &str = "cohort.json";
const UNASSIGNED: &str = "unassigned";

#[derive(Serialize, Deserialize)]
struct RecordEntry {
    patient_id: String,
    stay_id: String,
    age_years: u32,
    label: Label,
    onset_hour: Option<i64>,
    anchor_hour: i64,
    icu_transfers: u32,
    note_summary: String,
    split: Option<Split>,
    /// Path relative to the archive root.
    file: PathBuf,
    /// `[variable, column]` pairs that were imputed.
    imputed: Vec<[usize; 2]>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    variable_specs: Vec<VariableSpec>,
    records: Vec<RecordEntry>,
}

pub fn write_record_csv(path: &Path, m: &VitalsMatrix, specs: &[VariableSpec]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["variable".to_string()];
    header.extend((0..m.n_hours()).map(|c| (m.start_hour + c as i64).to_string()));
    w.write_record(&header)?;
    for (spec, row) in specs.iter().zip(&m.values) {
        let mut line = vec![spec.name.clone()];
        line.extend(row.iter().map(|v| {
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a record matrix; rows may come in any order but every variable of
/// `specs` must be present. Empty cells read as missing.
pub fn read_record_csv(path: &Path, specs: &[VariableSpec]) -> Result<VitalsMatrix> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("variable") {
        return Err(Error::MissingColumn("variable".into()));
    }
    let hours: Vec<i64> = headers
        .iter()
        .skip(1)
        .map(|h| {
            h.trim()
                .parse()
                .map_err(|_| Error::Data(format!("bad hour header `{h}`")))
        })
        .collect::<Result<_>>()?;
    if hours.is_empty() || hours.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Data(format!(
            "{}: hour headers must be consecutive",
            path.display()
        )));
    }
    let mut values = vec![None; specs.len()];
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let Some(var) = index_of(specs, &row[0]) else {
            continue;
        };
        let parsed = row
            .iter()
            .skip(1)
            .map(|c| {
                let c = c.trim();
                if c.is_empty() {
                    Ok(f64::NAN)
                } else {
                    c.parse::<f64>().map_err(|_| {
                        Error::Data(format!(
                            "{} line {}: bad value `{c}`",
                            path.display(),
                            i + 2
                        ))
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if parsed.len() != hours.len() {
            return Err(Error::Data(format!(
                "{} line {}: wrong column count",
                path.display(),
                i + 2
            )));
        }
        values[var] = Some(parsed);
    }
    let values = values
        .into_iter()
        .zip(specs)
        .map(|(v, s)| {
            v.ok_or_else(|| Error::Data(format!("{}: no row for `{}`", path.display(), s.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    VitalsMatrix::new(values, hours[0])
}

fn file_name(record: &PatientRecord) -> String {
    let safe: String = record
        .stay_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.csv")
}

pub fn save_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cohort.records.len());
    for r in &cohort.records {
        let split = cohort.split_of(r);
        let sub = split.map_or(UNASSIGNED, Split::dir_name);
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        let rel = PathBuf::from(sub).join(file_name(r));
        write_record_csv(&dir.join(&rel), &r.vitals, &cohort.variable_specs)?;
        let imputed = r
            .vitals
            .imputed_mask
            .iter()
            .enumerate()
            .flat_map(|(v, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, f)| **f)
                    .map(move |(c, _)| [v, c])
            })
            .collect();
        entries.push(RecordEntry {
            patient_id: r.patient_id.clone(),
            stay_id: r.stay_id.clone(),
            age_years: r.age_years,
            label: r.label,
            onset_hour: r.onset_hour,
            anchor_hour: r.anchor_hour,
            icu_transfers: r.icu_transfers,
            note_summary: r.note_summary.clone(),
            split,
            file: rel,
            imputed,
        });
    }
    let manifest = Manifest {
        format: COHORT_FORMAT.into(),
        version: COHORT_VERSION,
        variable_specs: cohort.variable_specs.clone(),
        records: entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != COHORT_FORMAT || manifest.version != COHORT_VERSION {
        return Err(Error::Data(format!(
            "{}: expected {COHORT_FORMAT} v{COHORT_VERSION}, found {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    let specs = manifest.variable_specs;
    let mut cohort = Cohort::new(Vec::new(), specs.clone());
    for e in manifest.records {
        let mut vitals = read_record_csv(&dir.join(&e.file), &specs)?;
        for [v, c] in e.imputed {
            if v < vitals.n_vars() && c < vitals.n_hours() {
                vitals.imputed_mask[v][c] = true;
            }
        }
        if let Some(s) = e.split {
            cohort.split_assignment.insert(e.stay_id.clone(), s);
        }
        cohort.records.push(PatientRecord {
            patient_id: e.patient_id,
            stay_id: e.stay_id,
            age_years: e.age_years,
            label: e.label,
            onset_hour: e.onset_hour,
            anchor_hour: e.anchor_hour,
            icu_transfers: e.icu_transfers,
            vitals,
            note_summary: e.note_summary,
        });
    }
    Ok(cohort)
}
