use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    /// `P = ⌊(T − L_p)/S⌋ + 2` when set, the conventional `+ 1` otherwise.
    pub plus_two: bool,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_len: 6,
            stride: 3,
            plus_two: true,
        }
    }
}

impl PatchConfig {
    /// The whole series as one segment.
    pub fn whole(t: usize) -> Self {
        PatchConfig {
            patch_len: t,
            stride: t,
            plus_two: true,
        }
    }

    /// Shrinks the patch to the series length for short windows.
    pub fn fit(self, t: usize) -> Self {
        PatchConfig {
            patch_len: self.patch_len.min(t),
            ..self
        }
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.patch_len == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "patch length and stride must be ≥ 1 (got {} and {})",
                self.patch_len, self.stride
            )));
        }
        if t < self.patch_len {
            return Err(Error::Config(format!(
                "series of length {t} is shorter than patch length {}",
                self.patch_len
            )));
        }
        Ok(())
    }
}

pub fn patch_count(t: usize, cfg: &PatchConfig) -> Result<usize> {
    cfg.validate(t)?;
    Ok((t - cfg.patch_len) / cfg.stride + if cfg.plus_two { 2 } else { 1 })
}

/// Index into the series for entry `j` of patch `p`, replicating the last
/// value past the end.
pub fn patch_index(t: usize, cfg: &PatchConfig, p: usize, j: usize) -> usize {
    (p * cfg.stride + j).min(t - 1)
}

/// Windows `p·S .. p·S + L_p − 1`, tail-padded with the last value.
pub fn patch(series: &[f64], cfg: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    let t = series.len();
    let n = patch_count(t, cfg)?;
    Ok((0..n)
        .map(|p| {
            (0..cfg.patch_len)
                .map(|j| series[patch_index(t, cfg, p, j)])
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patch_len: usize, stride: usize) -> PatchConfig {
        PatchConfig {
            patch_len,
            stride,
            plus_two: true,
        }
    }

    #[test]
    fn counts_from_the_formula() {
        assert_eq!(patch_count(30, &cfg(6, 3)).unwrap(), 10);
        assert_eq!(patch_count(30, &cfg(30, 1)).unwrap(), 2);
        assert_eq!(patch_count(31, &cfg(4, 4)).unwrap(), 8);
        let plus_one = PatchConfig {
            plus_two: false,
            ..cfg(6, 3)
        };
        assert_eq!(patch_count(30, &plus_one).unwrap(), 9);
    }

    #[test]
    fn overrun_window_replicates_last_value() {
        let s: Vec<f64> = (0..30).map(f64::from).collect();
        let p = patch(&s, &cfg(30, 1)).unwrap();
        assert_eq!(p[0], s);
        assert_eq!(p[1][..29], s[1..]);
        assert_eq!(p[1][29], 29.0);
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(patch(&[1.0, 2.0], &cfg(3, 1)).is_err());
        assert!(patch(&[1.0, 2.0], &cfg(0, 1)).is_err());
    }

    #[test]
    fn whole_series_gives_two_patches() {
        assert_eq!(patch_count(17, &PatchConfig::whole(17)).unwrap(), 2);
    }
}
