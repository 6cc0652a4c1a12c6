use serde::{Deserialize, Serialize};

use super::VariableSpec;
use crate::error::{Error, Result};

/// Hourly `N × T` record: rows are variables in spec order, columns are
/// consecutive hours starting at `start_hour`. A missing cell holds `NaN`
/// until [`impute`] fills it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitalsMatrix {
    pub values: Vec<Vec<f64>>,
    pub imputed_mask: Vec<Vec<bool>>,
    pub start_hour: i64,
}

impl VitalsMatrix {
    pub fn new(values: Vec<Vec<f64>>, start_hour: i64) -> Result<Self> {
        let t = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != t) {
            return Err(Error::Data("ragged vitals matrix".into()));
        }
        let imputed_mask = values.iter().map(|r| vec![false; r.len()]).collect();
        Ok(VitalsMatrix {
            values,
            imputed_mask,
            start_hour,
        })
    }

    pub fn missing(n_vars: usize, hours: usize, start_hour: i64) -> Self {
        VitalsMatrix {
            values: vec![vec![f64::NAN; hours]; n_vars],
            imputed_mask: vec![vec![false; hours]; n_vars],
            start_hour,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn n_hours(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Absolute hour of the last column.
    pub fn end_hour(&self) -> i64 {
        self.start_hour + self.n_hours() as i64 - 1
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[col]).collect()
    }

    pub fn col_of_hour(&self, hour: i64) -> Option<usize> {
        let c = hour - self.start_hour;
        (c >= 0 && (c as usize) < self.n_hours()).then_some(c as usize)
    }

    pub fn is_missing(&self, var: usize, col: usize) -> bool {
        self.values[var][col].is_nan()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().flatten().any(|v| v.is_nan())
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_nan()).count()
    }

    /// Fraction of cells that were missing before imputation.
    pub fn missing_rate(&self) -> f64 {
        let total = self.n_vars() * self.n_hours();
        if total == 0 {
            return 1.0;
        }
        let missing = self
            .values
            .iter()
            .zip(&self.imputed_mask)
            .flat_map(|(vr, mr)| vr.iter().zip(mr))
            .filter(|(v, m)| v.is_nan() || **m)
            .count();
        missing as f64 / total as f64
    }

    /// Columns for absolute hours `first..=last`.
    pub fn hours(&self, first: i64, last: i64) -> Result<VitalsMatrix> {
        let (Some(a), Some(b)) = (self.col_of_hour(first), self.col_of_hour(last)) else {
            return Err(Error::Data(format!(
                "hours {first}..={last} outside matrix hours {}..={}",
                self.start_hour,
                self.end_hour()
            )));
        };
        if a > b {
            return Err(Error::Data(format!("empty hour range {first}..={last}")));
        }
        Ok(VitalsMatrix {
            values: self.values.iter().map(|r| r[a..=b].to_vec()).collect(),
            imputed_mask: self
                .imputed_mask
                .iter()
                .map(|r| r[a..=b].to_vec())
                .collect(),
            start_hour: first,
        })
    }

    /// Appends one column at hour `end_hour() + 1`.
    pub fn push_column(&mut self, col: &[f64]) -> Result<()> {
        if col.len() != self.n_vars() {
            return Err(Error::Shape {
                op: "push_column",
                left: vec![self.n_vars(), self.n_hours()],
                right: vec![col.len()],
            });
        }
        for ((row, mask), v) in self.values.iter_mut().zip(&mut self.imputed_mask).zip(col) {
            row.push(*v);
            mask.push(false);
        }
        Ok(())
    }
}

/// One raw measurement. `time` is in fractional hours; `order` is file order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub var: usize,
    pub time: f64,
    pub value: f64,
    pub order: usize,
}

/// Buckets events into hourly cells over `start_hour .. start_hour + hours`.
/// Several measurements in one hour collapse to the latest (by time, then
/// file order); empty cells stay missing.
pub fn resample_hourly(
    events: &[Event],
    n_vars: usize,
    start_hour: i64,
    hours: usize,
) -> VitalsMatrix {
    let mut m = VitalsMatrix::missing(n_vars, hours, start_hour);
    let mut stamp: Vec<Vec<Option<(f64, usize)>>> = vec![vec![None; hours]; n_vars];
    for e in events {
        if e.var >= n_vars || !e.time.is_finite() {
            continue;
        }
        let Some(col) = m.col_of_hour(e.time.floor() as i64) else {
            continue;
        };
        let key = (e.time, e.order);
        let newer = match stamp[e.var][col] {
            None => true,
            Some(prev) => key.0 > prev.0 || (key.0 == prev.0 && key.1 > prev.1),
        };
        if newer {
            stamp[e.var][col] = Some(key);
            m.values[e.var][col] = e.value;
        }
    }
    m
}

/// Blanks values outside each variable's plausible range. Returns the number
/// of cells blanked.
pub fn clean_outliers(m: &mut VitalsMatrix, specs: &[VariableSpec]) -> usize {
    let mut n = 0;
    for (row, spec) in m.values.iter_mut().zip(specs) {
        for v in row.iter_mut() {
            if !v.is_nan() && !spec.is_plausible(*v) {
                *v = f64::NAN;
                n += 1;
            }
        }
    }
    n
}

/// Last observation carried forward, then leading gaps filled backward from
/// the first observation; a variable with no observation at all takes its
/// normal-range midpoint. Filled cells are flagged in `imputed_mask`.
pub fn impute(m: &VitalsMatrix, specs: &[VariableSpec]) -> VitalsMatrix {
    let mut out = m.clone();
    for (v, (row, mask)) in out.values.iter_mut().zip(&mut out.imputed_mask).enumerate() {
        let Some(first) = row.iter().position(|x| !x.is_nan()) else {
            let fill = specs.get(v).map_or(0.0, VariableSpec::normal_midpoint);
            row.iter_mut().for_each(|x| *x = fill);
            mask.iter_mut().for_each(|f| *f = true);
            continue;
        };
        let mut last = row[first];
        for (x, f) in row.iter_mut().zip(mask.iter_mut()) {
            if x.is_nan() {
                *x = last;
                *f = true;
            } else {
                last = *x;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::default_variables;

    fn one_var(values: Vec<f64>) -> VitalsMatrix {
        VitalsMatrix::new(vec![values], 0).unwrap()
    }

    #[test]
    fn forward_then_backward_fill() {
        let specs = default_variables();
        let out = impute(&one_var(vec![f64::NAN, 5.0, f64::NAN, 7.0]), &specs);
        assert_eq!(out.values[0], vec![5.0, 5.0, 5.0, 7.0]);
        assert_eq!(out.imputed_mask[0], vec![true, false, true, false]);
    }

    #[test]
    fn all_missing_takes_range_midpoint() {
        let mut specs = default_variables();
        specs[0].normal_range = [70.0, 100.0];
        let out = impute(&one_var(vec![f64::NAN; 4]), &specs);
        assert_eq!(out.values[0], vec![85.0; 4]);
        assert!(out.imputed_mask[0].iter().all(|&f| f));
    }

    #[test]
    fn fully_observed_is_unchanged() {
        let specs = default_variables();
        let m = one_var(vec![1.0, 2.0, 3.0]);
        let out = impute(&m, &specs);
        assert_eq!(out, m);
    }

    #[test]
    fn latest_measurement_in_hour_wins() {
        let events = [
            Event {
                var: 0,
                time: 5.0 + 10.0 / 60.0,
                value: 90.0,
                order: 0,
            },
            Event {
                var: 0,
                time: 5.0 + 50.0 / 60.0,
                value: 97.0,
                order: 1,
            },
            Event {
                var: 0,
                time: 2.5,
                value: 80.0,
                order: 2,
            },
        ];
        let m = resample_hourly(&events, 1, 0, 6);
        assert_eq!(m.values[0][5], 97.0);
        assert_eq!(m.values[0][2], 80.0);
        assert!(m.is_missing(0, 3));
    }

    #[test]
    fn file_order_breaks_timestamp_ties() {
        let events = [
            Event {
                var: 0,
                time: 1.0,
                value: 1.0,
                order: 0,
            },
            Event {
                var: 0,
                time: 1.0,
                value: 2.0,
                order: 1,
            },
        ];
        assert_eq!(resample_hourly(&events, 1, 0, 2).values[0][1], 2.0);
    }

    #[test]
    fn empty_input_is_all_missing() {
        let m = resample_hourly(&[], 3, 10, 4);
        assert_eq!(m.missing_count(), 12);
    }

    #[test]
    fn outlier_is_blanked_then_imputed() {
        let specs = default_variables();
        let mut m = one_var(vec![80.0, 900.0, 82.0]);
        assert_eq!(clean_outliers(&mut m, &specs), 1);
        let out = impute(&m, &specs);
        assert_eq!(out.values[0], vec![80.0, 80.0, 82.0]);
    }

    #[test]
    fn hour_window_uses_absolute_hours() {
        let m = VitalsMatrix::new(vec![(0..10).map(f64::from).collect()], 100).unwrap();
        let w = m.hours(103, 105).unwrap();
        assert_eq!(w.values[0], vec![3.0, 4.0, 5.0]);
        assert_eq!(w.start_hour, 103);
        assert!(m.hours(99, 101).is_err());
    }
}
