//! Optional external agent over a chat-completion style endpoint.
//!
//! The request carries the variable ranges, last observations, predictions
//! and the rule table as hints. The reply must contain a JSON object
//! `{"corrections":[{"variable":…,"action":…,"alpha":…}]}`, either as the
//! whole body or inside the first choice's message content.

use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{deviation, Action, Agent, Correction, RangeTable};
use crate::error::{Error, Result};

pub const AGENT_URL_ENV: &str = "SEPSIS_AGENT_URL";
pub const AGENT_KEY_ENV: &str = "SEPSIS_AGENT_KEY";

#[derive(Debug, Clone)]
pub struct HttpAgent {
    pub url: String,
    pub key: Option<String>,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct WireCorrection {
    variable: String,
    action: String,
    #[serde(default)]
    alpha: Option<f64>,
}

#[derive(Deserialize)]
struct WireReply {
    corrections: Vec<WireCorrection>,
}

/// The first balanced `{…}` block of `text` that parses as a reply.
fn find_reply(text: &str) -> Option<WireReply> {
    let bytes = text.as_bytes();
    for start in text.match_indices('{').map(|(i, _)| i) {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (off, &b) in bytes[start..].iter().enumerate() {
            match (in_str, b) {
                (true, b'\\') if !escaped => {
                    escaped = true;
                    continue;
                }
                (true, b'"') if !escaped => in_str = false,
                (false, b'"') => in_str = true,
                (false, b'{') => depth += 1,
                (false, b'}') => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(r) = serde_json::from_str::<WireReply>(&text[start..=start + off])
                        {
                            return Some(r);
                        }
                        break;
                    }
                }
                _ => {}
            }
            escaped = false;
        }
    }
    None
}

/// Extracts corrections from a reply body.
pub fn parse_agent_reply(
    body: &str,
    pred: &[f64],
    last: &[f64],
    ranges: &RangeTable,
) -> Result<Vec<Correction>> {
    let content = serde_json::from_str::<Value>(body).ok().and_then(|v| {
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
    });
    let reply = content
        .as_deref()
        .and_then(find_reply)
        .or_else(|| find_reply(body))
        .ok_or_else(|| Error::Agent("no corrections block in reply".into()))?;
    reply
        .corrections
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let action = match (w.action.as_str(), w.alpha) {
                ("none", _) => Action::None,
                ("clamp_to_bound", _) => Action::ClampToBound,
                ("shrink_toward_last", Some(alpha)) => Action::ShrinkTowardLast { alpha },
                (other, _) => return Err(Error::Agent(format!("unknown action `{other}`"))),
            };
            let dev = match (pred.get(i), last.get(i)) {
                (Some(p), Some(l)) if i < ranges.len() => deviation(*p, ranges.reference(i, *l)),
                _ => return Err(Error::Agent("more corrections than variables".into())),
            };
            Ok(Correction {
                variable: w.variable,
                deviation: dev,
                action,
            })
        })
        .collect()
}

impl HttpAgent {
    pub fn from_env(timeout: Duration) -> Option<Self> {
        let url = std::env::var(AGENT_URL_ENV)
            .ok()
            .filter(|u| !u.is_empty())?;
        Some(HttpAgent {
            url,
            key: std::env::var(AGENT_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout,
        })
    }

    fn request(&self, pred: &[f64], last: &[f64], ranges: &RangeTable) -> Value {
        let payload = json!({
            "variables": ranges.entries,
            "last_observed": last,
            "predictions": pred,
            "rule_hints": "deviation outside the validated range (or beyond the last value) as a fraction of range width: 0 none; up to 0.05 shrink_toward_last alpha 0.5; up to 0.20 shrink_toward_last alpha 0.25; above clamp_to_bound",
        });
        json!({
            "messages": [
                {"role": "system", "content": "Review physiological forecasts. Answer with JSON {\"corrections\":[{\"variable\":name,\"action\":\"none|clamp_to_bound|shrink_toward_last\",\"alpha\":number}]} in variable order."},
                {"role": "user", "content": payload.to_string()},
            ],
        })
    }
}

impl Agent for HttpAgent {
    fn name(&self) -> &str {
        "http"
    }

    fn review(&self, pred: &[f64], last: &[f64], ranges: &RangeTable) -> Result<Vec<Correction>> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.url);
        if let Some(k) = &self.key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req
            .send_json(self.request(pred, last, ranges))
            .map_err(|e| Error::Agent(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Agent(e.to_string()))?;
        parse_agent_reply(&body, pred, last, ranges)
    }
}
