use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_VARIABLES: &str = include_str!("../../data/variables.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Above,
    Below,
}

impl Direction {
    /// Strict violation: the value is past the threshold.
    pub fn violated(self, value: f64, threshold: f64) -> bool {
        match self {
            Direction::Above => value > threshold,
            Direction::Below => value < threshold,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarnThreshold {
    pub threshold: f64,
    pub direction: Direction,
}

/// Direction a variable drifts in synthetic deterioration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Deterioration {
    Rises,
    Falls,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub unit: String,
    pub normal_range: [f64; 2],
    /// Hard physical bounds; anything outside is an outlier.
    pub plausible_range: [f64; 2],
    /// Range the post-processing review accepts without correction.
    pub validated_range: [f64; 2],
    pub max_hourly_change: f64,
    #[serde(default)]
    pub warn: Option<WarnThreshold>,
    #[serde(default)]
    pub deterioration: Deterioration,
    /// Value reached at full synthetic severity.
    pub septic_value: f64,
}

impl VariableSpec {
    pub fn normal_midpoint(&self) -> f64 {
        0.5 * (self.normal_range[0] + self.normal_range[1])
    }

    pub fn normal_width(&self) -> f64 {
        self.normal_range[1] - self.normal_range[0]
    }

    pub fn is_plausible(&self, v: f64) -> bool {
        v.is_finite() && v >= self.plausible_range[0] && v <= self.plausible_range[1]
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        let bad = |what: &str| Err(Error::Config(format!("variable `{}`: {what}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("variable with empty name".into()));
        }
        if !ordered(self.normal_range) {
            return bad("normal_range must satisfy lo < hi");
        }
        if !ordered(self.plausible_range) {
            return bad("plausible_range must satisfy lo < hi");
        }
        if !ordered(self.validated_range) {
            return bad("validated_range must satisfy lo < hi");
        }
        if self.plausible_range[0] > self.normal_range[0]
            || self.plausible_range[1] < self.normal_range[1]
        {
            return bad("plausible_range must contain normal_range");
        }
        if !(self.max_hourly_change > 0.0) {
            return bad("max_hourly_change must be positive");
        }
        Ok(())
    }
}

/// The shipped 20-variable set.
pub fn default_variables() -> Vec<VariableSpec> {
    serde_json::from_str(DEFAULT_VARIABLES).expect("embedded variable table parses")
}

pub fn validate_specs(specs: &[VariableSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("variable spec list is empty".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        s.validate()?;
        if specs[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::Config(format!("duplicate variable `{}`", s.name)));
        }
    }
    Ok(())
}

pub fn load_specs(path: &Path) -> Result<Vec<VariableSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let specs: Vec<VariableSpec> = serde_json::from_str(&text)?;
    validate_specs(&specs)?;
    Ok(specs)
}

pub fn index_of(specs: &[VariableSpec], name: &str) -> Option<usize> {
    specs.iter().position(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_valid_and_covers_scoring_inputs() {
        let specs = default_variables();
        validate_specs(&specs).unwrap();
        assert_eq!(specs.len(), 20);
        for name in [
            "hr",
            "sbp",
            "dbp",
            "mbp",
            "rr",
            "spo2",
            "temp",
            "glucose",
            "gcs",
            "wbc",
            "bilirubin",
            "platelets",
            "lactate",
            "fio2",
            "bun",
            "pao2",
            "creatinine",
            "urine_output",
            "paco2",
            "bands",
        ] {
            assert!(index_of(&specs, name).is_some(), "{name}");
        }
    }

    #[test]
    fn rejects_normal_outside_plausible() {
        let mut s = default_variables().remove(0);
        s.plausible_range = [70.0, 300.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn rejects_inverted_range() {
        let mut s = default_variables().remove(0);
        s.normal_range = [100.0, 60.0];
        assert!(s.validate().is_err());
    }
}
