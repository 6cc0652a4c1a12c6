//! Post-processing of raw indicator forecasts: an agent reviews each
//! prediction against validated ranges and proposes a correction, a learned
//! per-variable scale damps the increment from the last observation, and a
//! hard projection keeps the result inside the admissible envelope.

#[cfg(feature = "http-agent")]
mod http;

use serde::{Deserialize, Serialize};

#[cfg(feature = "http-agent")]
pub use http::{parse_agent_reply, HttpAgent, AGENT_KEY_ENV, AGENT_URL_ENV};

use crate::cohort::VariableSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub variable: String,
    pub lo: f64,
    pub hi: f64,
    /// Largest plausible change per hour.
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    pub entries: Vec<RangeEntry>,
}

impl RangeTable {
    pub fn from_specs(specs: &[VariableSpec]) -> Self {
        RangeTable {
            entries: specs
                .iter()
                .map(|s| RangeEntry {
                    variable: s.name.clone(),
                    lo: s.validated_range[0],
                    hi: s.validated_range[1],
                    step: s.max_hourly_change,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if !(e.lo < e.hi) || !(e.step > 0.0) {
                return Err(Error::Config(format!(
                    "bad range entry for `{}`",
                    e.variable
                )));
            }
        }
        Ok(())
    }

    /// Values no further out than the validated range or the last
    /// observation need no correction.
    pub fn reference(&self, i: usize, last: f64) -> (f64, f64) {
        let e = &self.entries[i];
        (e.lo.min(last), e.hi.max(last))
    }

    /// Validated range widened by `hours` steps around the last observation.
    pub fn envelope(&self, i: usize, last: f64, hours: f64) -> (f64, f64) {
        let e = &self.entries[i];
        (
            e.lo.min(last - e.step * hours),
            e.hi.max(last + e.step * hours),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    None,
    ClampToBound,
    ShrinkTowardLast { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub variable: String,
    /// Distance outside the reference interval.
    pub deviation: f64,
    pub action: Action,
}

impl Correction {
    /// Value after the action; acted-on values end inside `reference`.
    pub fn corrected(&self, pred: f64, last: f64, reference: (f64, f64)) -> f64 {
        match self.action {
            Action::None => pred,
            Action::ClampToBound => pred.clamp(reference.0, reference.1),
            Action::ShrinkTowardLast { alpha } => {
                (last + alpha * (pred - last)).clamp(reference.0, reference.1)
            }
        }
    }
}

pub trait Agent: Send + Sync {
    fn name(&self) -> &str;
    fn review(&self, pred: &[f64], last: &[f64], ranges: &RangeTable) -> Result<Vec<Correction>>;
}

/// Deviation as a fraction of the range width: ≤ 5 % shrinks halfway toward
/// the last value, ≤ 20 % a quarter of the way, beyond that clamps.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleAgent;

pub fn deviation(pred: f64, reference: (f64, f64)) -> f64 {
    if pred > reference.1 {
        pred - reference.1
    } else if pred < reference.0 {
        reference.0 - pred
    } else {
        0.0
    }
}

pub fn rule_action(deviation: f64, width: f64) -> Action {
    let frac = deviation / width;
    if deviation == 0.0 {
        Action::None
    } else if frac <= 0.05 {
        Action::ShrinkTowardLast { alpha: 0.5 }
    } else if frac <= 0.20 {
        Action::ShrinkTowardLast { alpha: 0.25 }
    } else {
        Action::ClampToBound
    }
}

impl Agent for RuleAgent {
    fn name(&self) -> &str {
        "rule"
    }

    fn review(&self, pred: &[f64], last: &[f64], ranges: &RangeTable) -> Result<Vec<Correction>> {
        check_lengths(pred, last, ranges)?;
        Ok(ranges
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let dev = deviation(pred[i], ranges.reference(i, last[i]));
                Correction {
                    variable: e.variable.clone(),
                    deviation: dev,
                    action: rule_action(dev, e.hi - e.lo),
                }
            })
            .collect())
    }
}

fn check_lengths(pred: &[f64], last: &[f64], ranges: &RangeTable) -> Result<()> {
    if pred.len() != ranges.len() || last.len() != ranges.len() {
        return Err(Error::Shape {
            op: "review",
            left: vec![pred.len(), last.len()],
            right: vec![ranges.len()],
        });
    }
    Ok(())
}

/// Agent output must name every variable in order and act exactly on the
/// deviating ones.
fn check_corrections(
    corr: &[Correction],
    pred: &[f64],
    last: &[f64],
    ranges: &RangeTable,
) -> Result<()> {
    if corr.len() != ranges.len() {
        return Err(Error::Agent(format!(
            "{} corrections for {} variables",
            corr.len(),
            ranges.len()
        )));
    }
    for (i, (c, e)) in corr.iter().zip(&ranges.entries).enumerate() {
        let dev = deviation(pred[i], ranges.reference(i, last[i]));
        if c.variable != e.variable {
            return Err(Error::Agent(format!(
                "correction {i} names `{}`, expected `{}`",
                c.variable, e.variable
            )));
        }
        if (c.action == Action::None) != (dev == 0.0) {
            return Err(Error::Agent(format!(
                "action for `{}` inconsistent with deviation {dev}",
                e.variable
            )));
        }
        if let Action::ShrinkTowardLast { alpha } = c.action {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Agent(format!(
                    "alpha {alpha} for `{}` outside [0, 1]",
                    e.variable
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Review {
    pub corrections: Vec<Correction>,
    /// Set when the configured agent failed and the rule agent answered.
    pub fallback: Option<String>,
}

/// Asks `agent`; any failure or malformed answer falls back to the rule
/// agent, so review never fails on agent trouble.
pub fn review(
    pred: &[f64],
    last: &[f64],
    ranges: &RangeTable,
    agent: &dyn Agent,
) -> Result<Review> {
    check_lengths(pred, last, ranges)?;
    let answer = agent
        .review(pred, last, ranges)
        .and_then(|c| check_corrections(&c, pred, last, ranges).map(|_| c));
    match answer {
        Ok(corrections) => Ok(Review {
            corrections,
            fallback: None,
        }),
        Err(e) => {
            log::warn!("agent `{}` failed, using rule agent: {e}", agent.name());
            Ok(Review {
                corrections: RuleAgent.review(pred, last, ranges)?,
                fallback: Some(e.to_string()),
            })
        }
    }
}

/// `X[i] = bound(last[i] + s[i]·(corrected[i] − last[i]))` with `bound` the
/// projection onto the envelope for a forecast `hours` ahead.
pub fn apply(
    pred: &[f64],
    corrections: &[Correction],
    scale: &[f64],
    last: &[f64],
    ranges: &RangeTable,
    hours: f64,
) -> Result<Vec<f64>> {
    check_lengths(pred, last, ranges)?;
    if corrections.len() != pred.len() || scale.len() != pred.len() {
        return Err(Error::Shape {
            op: "postproc_apply",
            left: vec![pred.len()],
            right: vec![corrections.len(), scale.len()],
        });
    }
    Ok((0..pred.len())
        .map(|i| {
            let c = corrections[i].corrected(pred[i], last[i], ranges.reference(i, last[i]));
            let (lo, hi) = ranges.envelope(i, last[i], hours);
            let x = last[i] + scale[i] * (c - last[i]);
            if x.is_finite() {
                x.clamp(lo, hi)
            } else {
                last[i].clamp(lo, hi)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[default]
    Rule,
    /// Endpoint from the environment; rule agent when unset or failing.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub enabled: bool,
    pub agent: AgentKind,
    pub timeout_secs: f64,
    /// Train the scale vector `s` with stage 1.
    pub learn_scale: bool,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            enabled: true,
            agent: AgentKind::Rule,
            timeout_secs: 5.0,
            learn_scale: true,
        }
    }
}

impl PostprocConfig {
    pub fn build_agent(&self) -> Box<dyn Agent> {
        match self.agent {
            AgentKind::Rule => Box::new(RuleAgent),
            #[cfg(feature = "http-agent")]
            AgentKind::Http => {
                match HttpAgent::from_env(std::time::Duration::from_secs_f64(self.timeout_secs)) {
                    Some(a) => Box::new(a),
                    None => {
                        log::warn!("{AGENT_URL_ENV} unset, using rule agent");
                        Box::new(RuleAgent)
                    }
                }
            }
            #[cfg(not(feature = "http-agent"))]
            AgentKind::Http => {
                log::warn!("built without the http agent, using rule agent");
                Box::new(RuleAgent)
            }
        }
    }
}
