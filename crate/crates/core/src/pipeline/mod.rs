//! Two-stage training: stage 1 forecasts the indicators at the evaluation
//! hour, stage 2 classifies onset from the history joined with the
//! constrained forecast.

mod model;
mod suite;
mod train;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::cohort::SPAN_HOURS;
use crate::error::{Error, Result};
use crate::numcore::SgdConfig;
use crate::postproc::PostprocConfig;
use crate::reprogram::{PatchConfig, ReprogramConfig};

pub use model::{assemble_stage2_input, Inference, Model, ModelMeta, Prediction, Sample};
pub use suite::{
    evaluate, run_ablation_suite, run_horizon_sweep, samples_for, train_and_evaluate, train_task,
    AblationReport, AblationRow, HorizonCell, HorizonReport, TaskEval,
};
pub use train::{stage1_loss, stage2_inputs, train_stage1, train_stage2, EpochLog, TrainingLog};

/// Evaluation hour `t_k = anchor − offset_k`; inputs end `horizon` hours
/// earlier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskSpec {
    pub offset_k: i64,
    pub horizon: i64,
}

impl TaskSpec {
    pub fn new(offset_k: i64, horizon: i64) -> Result<Self> {
        let t = TaskSpec { offset_k, horizon };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset_k < 0 || self.horizon < 1 || self.offset_k + self.horizon > SPAN_HOURS {
            return Err(Error::Config(format!(
                "task offset {} horizon {} leaves no input hours in a {SPAN_HOURS} hour span",
                self.offset_k, self.horizon
            )));
        }
        Ok(())
    }

    pub fn input_first(&self, anchor: i64) -> i64 {
        anchor - SPAN_HOURS
    }

    pub fn input_last(&self, anchor: i64) -> i64 {
        anchor - self.offset_k - self.horizon
    }

    pub fn target_hour(&self, anchor: i64) -> i64 {
        anchor - self.offset_k
    }

    /// Observed columns, `SPAN − k − h + 1`.
    pub fn input_hours(&self) -> usize {
        (SPAN_HOURS - self.offset_k - self.horizon + 1) as usize
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}h{}", self.offset_k, self.horizon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_patient_summary: bool,
    pub use_patching: bool,
    pub use_prior_prediction: bool,
    pub use_st_extraction: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_patient_summary: true,
            use_patching: true,
            use_prior_prediction: true,
            use_st_extraction: true,
        }
    }
}

impl AblationFlags {
    pub const ROWS: [&'static str; 5] = ["full", "no-summary", "no-patching", "no-prior", "no-st"];

    /// The full model and each single removal.
    pub fn table_rows() -> Vec<(&'static str, AblationFlags)> {
        Self::ROWS
            .iter()
            .map(|r| (*r, r.parse().expect("known row")))
            .collect()
    }

    pub fn patch_config(&self, base: &PatchConfig, t: usize) -> PatchConfig {
        if self.use_patching {
            base.fit(t)
        } else {
            PatchConfig::whole(t)
        }
    }
}

/// `all` / `full`, or a comma list of `no-summary`, `no-patching`,
/// `no-prior`, `no-st`.
impl FromStr for AblationFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut f = AblationFlags::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" | "full" => {}
                "no-summary" => f.use_patient_summary = false,
                "no-patching" => f.use_patching = false,
                "no-prior" => f.use_prior_prediction = false,
                "no-st" => f.use_st_extraction = false,
                other => return Err(Error::Config(format!("unknown flag `{other}`"))),
            }
        }
        Ok(f)
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.use_patient_summary {
            parts.push("no-summary");
        }
        if !self.use_patching {
            parts.push("no-patching");
        }
        if !self.use_prior_prediction {
            parts.push("no-prior");
        }
        if !self.use_st_extraction {
            parts.push("no-st");
        }
        if parts.is_empty() {
            write!(f, "all")
        } else {
            write!(f, "{}", parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub reprogram: ReprogramConfig,
    pub postproc: PostprocConfig,
    /// Prompt token budget; also capped by the backbone context.
    pub prompt_tokens: usize,
    /// Normalization std floor as a fraction of the normal-range width.
    pub norm_floor: f64,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                layers: 2,
                width: 16,
                heads: 2,
                context: 96,
                ..BackboneConfig::default()
            },
            reprogram: ReprogramConfig {
                prototypes: 16,
                ..ReprogramConfig::default()
            },
            postproc: PostprocConfig::default(),
            prompt_tokens: 64,
            norm_floor: 0.05,
            classifier_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Train stage 1 and stage 2 through all parameters in stage 2.
    pub joint_finetune: bool,
    /// Worker threads for per-record evaluation.
    pub jobs: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 12,
            batch_size: 16,
            sgd: SgdConfig {
                lr: 0.01,
                momentum: 0.9,
                clip_norm: Some(5.0),
            },
            patience: 3,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig::default(),
            stage2: StageConfig {
                epochs: 300,
                batch_size: 64,
                sgd: SgdConfig {
                    lr: 0.02,
                    momentum: 0.9,
                    clip_norm: Some(5.0),
                },
                patience: 40,
            },
            joint_finetune: false,
            jobs: 1,
        }
    }
}

/// Run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub cohort: Option<PathBuf>,
    pub offsets: Vec<i64>,
    pub horizon: i64,
    pub flags: AblationFlags,
    pub seeds: Vec<u64>,
    /// One model for all offsets instead of one per offset.
    pub shared_model: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: None,
            offsets: crate::cohort::DEFAULT_OFFSETS.to_vec(),
            horizon: 1,
            flags: AblationFlags::default(),
            seeds: vec![0],
            shared_model: false,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn tasks(&self) -> Result<Vec<TaskSpec>> {
        self.offsets
            .iter()
            .map(|&k| TaskSpec::new(k, self.horizon))
            .collect()
    }
}

/// Maps `f` over `items` on up to `jobs` scoped threads; output order is
/// input order.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(
                h.join()
                    .map_err(|_| Error::Data("evaluation worker panicked".into()))??,
            );
        }
        Ok(out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_arithmetic() {
        let t = TaskSpec::new(24, 4).unwrap();
        assert_eq!(t.input_last(100), 72);
        assert_eq!(t.target_hour(100), 76);
        assert_eq!(t.input_hours(), 3);
        assert_eq!(TaskSpec::new(4, 1).unwrap().input_hours(), 26);
        for k in [24, 12, 8, 6, 4] {
            for h in 1..4 {
                let a = TaskSpec::new(k, h).unwrap();
                let b = TaskSpec::new(k, h + 1).unwrap();
                assert!(b.input_hours() < a.input_hours());
            }
        }
        assert!(TaskSpec::new(-1, 1).is_err());
        assert!(TaskSpec::new(4, 0).is_err());
        assert!(TaskSpec::new(29, 2).is_err());
    }

    #[test]
    fn flags_roundtrip_through_text() {
        for (name, f) in AblationFlags::table_rows() {
            let back: AblationFlags = f.to_string().parse().unwrap();
            assert_eq!(back, f, "{name}");
        }
        assert!("no-such".parse::<AblationFlags>().is_err());
        assert_eq!(
            "all".parse::<AblationFlags>().unwrap(),
            AblationFlags::default()
        );
    }

    #[test]
    fn no_patching_gives_two_whole_patches() {
        let f: AblationFlags = "no-patching".parse().unwrap();
        let cfg = f.patch_config(&PatchConfig::default(), 26);
        assert_eq!(crate::reprogram::patch_count(26, &cfg).unwrap(), 2);
    }

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u32> = (0..37).collect();
        let ys = par_map(&xs, 4, |x| Ok(x * 2)).unwrap();
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
