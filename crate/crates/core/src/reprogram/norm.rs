use serde::{Deserialize, Serialize};

use crate::cohort::{VariableSpec, VitalsMatrix};
use crate::error::{Error, Result};

/// Per-variable instance normalization fitted on one input window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceNorm {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InstanceNorm {
    /// Mean and standard deviation over the window. The deviation is floored
    /// at `floor_frac` of the variable's normal-range width so flat series do
    /// not blow up.
    pub fn fit(window: &VitalsMatrix, specs: &[VariableSpec], floor_frac: f64) -> Result<Self> {
        if window.n_hours() == 0 {
            return Err(Error::EmptyWindow);
        }
        if window.n_vars() != specs.len() {
            return Err(Error::Shape {
                op: "instance_norm",
                left: vec![window.n_vars(), window.n_hours()],
                right: vec![specs.len()],
            });
        }
        let mut center = Vec::with_capacity(specs.len());
        let mut scale = Vec::with_capacity(specs.len());
        for (row, spec) in window.values.iter().zip(specs) {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            center.push(mean);
            scale.push(var.sqrt().max(floor_frac * spec.normal_width()));
        }
        Ok(InstanceNorm { center, scale })
    }

    pub fn normalize(&self, var: usize, v: f64) -> f64 {
        (v - self.center[var]) / self.scale[var]
    }

    pub fn denormalize(&self, var: usize, v: f64) -> f64 {
        self.center[var] + self.scale[var] * v
    }

    /// Row-major `N × T` normalized values.
    pub fn apply(&self, m: &VitalsMatrix) -> Vec<f64> {
        m.values
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |v| self.normalize(i, *v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::default_variables;

    #[test]
    fn roundtrip_and_floor() {
        let specs = default_variables()[..2].to_vec();
        let m = VitalsMatrix::new(vec![vec![80.0, 90.0, 100.0], vec![120.0; 3]], 0).unwrap();
        let n = InstanceNorm::fit(&m, &specs, 0.05).unwrap();
        assert_eq!(n.center, vec![90.0, 120.0]);
        assert_eq!(n.scale[1], 0.05 * specs[1].normal_width());
        let z = n.apply(&m);
        assert!((n.denormalize(0, z[2]) - 100.0).abs() < 1e-12);
        assert_eq!(z[3..], [0.0; 3]);
    }
}
