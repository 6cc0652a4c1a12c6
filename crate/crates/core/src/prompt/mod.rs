//! Prompt-as-prefix: dataset context, task, criteria, the note summary,
//! key-variable warnings and per-variable input statistics, rendered through
//! a plain-text template and embedded with the backbone vocabulary table.

mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use vocab::{number_bin, split_pieces, Piece, Vocab, PAD, UNK};

use crate::cohort::{Direction, VariableSpec, VitalsMatrix};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const DEFAULT_TEMPLATE: &str = include_str!("../../data/prompt_template.txt");
pub const PLACEHOLDERS: [&str; 6] = [
    "{dataset_context}",
    "{task}",
    "{criteria}",
    "{summary}",
    "{warnings}",
    "{statistics}",
];
pub const DEFAULT_DEAD_BAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn sentence(self) -> &'static str {
        match self {
            TaskKind::Regression => "forecast every indicator at the evaluation hour",
            TaskKind::Classification => "classify sepsis onset at the evaluation hour",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub dataset_context: String,
    pub task_kind: TaskKind,
    pub criteria_blurb: String,
}

impl PromptSpec {
    pub fn new(task_kind: TaskKind) -> Self {
        PromptSpec {
            dataset_context: "synthetic icu cohort of hourly vital signs before sepsis onset"
                .into(),
            task_kind,
            criteria_blurb: "onset is a sofa score of at least 2 points".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Rising,
    Falling,
    Stable,
}

impl Trend {
    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Rising => "rising",
            Trend::Falling => "falling",
            Trend::Stable => "stable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub last: f64,
    /// Least-squares slope per hour, raw units.
    pub slope: f64,
    pub trend: Trend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub variables: Vec<VariableStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningItem {
    pub variable: String,
    /// Column index within the window.
    pub hour: usize,
    pub value: f64,
    pub threshold: f64,
    pub direction: Direction,
}

/// OLS slope of `ys` against `0, 1, …`.
pub fn ols_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let xbar = (n - 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - xbar;
        sxy += dx * (y - ybar);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Trend labels compare the slope, in normal-range widths per hour, with
/// `dead_band`.
pub fn summarize_stats(
    window: &VitalsMatrix,
    specs: &[VariableSpec],
    dead_band: f64,
) -> Result<StatsSummary> {
    if window.n_hours() == 0 {
        return Err(Error::EmptyWindow);
    }
    let variables = window
        .values
        .iter()
        .zip(specs)
        .map(|(row, spec)| {
            let slope = ols_slope(row);
            let rel = slope / spec.normal_width();
            let trend = if rel > dead_band {
                Trend::Rising
            } else if rel < -dead_band {
                Trend::Falling
            } else {
                Trend::Stable
            };
            VariableStats {
                name: spec.name.clone(),
                min: row.iter().cloned().fold(f64::INFINITY, f64::min),
                max: row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                mean: row.iter().sum::<f64>() / row.len() as f64,
                last: *row.last().expect("non-empty window"),
                slope,
                trend,
            }
        })
        .collect();
    Ok(StatsSummary { variables })
}

/// Every strict threshold violation, ordered by hour then variable.
pub fn detect_warnings(window: &VitalsMatrix, specs: &[VariableSpec]) -> Vec<WarningItem> {
    let mut out = Vec::new();
    for hour in 0..window.n_hours() {
        for (row, spec) in window.values.iter().zip(specs) {
            let Some(w) = spec.warn else { continue };
            if w.direction.violated(row[hour], w.threshold) {
                out.push(WarningItem {
                    variable: spec.name.clone(),
                    hour,
                    value: row[hour],
                    threshold: w.threshold,
                    direction: w.direction,
                });
            }
        }
    }
    out
}

fn fmt_num(v: f64) -> String {
    format!("{v:.1}")
}

/// `"{name} {trend} last {v} mean {v}"`, one decimal.
pub fn stats_line(s: &VariableStats) -> String {
    format!(
        "{} {} last {} mean {}",
        s.name,
        s.trend.as_str(),
        fmt_num(s.last),
        fmt_num(s.mean)
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            text: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(text: String) -> Result<Self> {
        for p in PLACEHOLDERS {
            if text.matches(p).count() != 1 {
                return Err(Error::Config(format!(
                    "prompt template must contain {p} exactly once"
                )));
            }
        }
        if text
            .lines()
            .filter(|l| l.contains("{warnings}"))
            .any(|l| l.contains("{statistics}"))
        {
            return Err(Error::Config("{warnings} needs a line of its own".into()));
        }
        Ok(PromptTemplate { text })
    }

    pub fn load(path: &Path) -> Result<Self> {
        PromptTemplate::new(std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// Rendered prompt together with its droppable sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    fixed: [String; 4],
    warnings: Vec<String>,
    statistics: Vec<String>,
}

fn render_parts(
    template: &PromptTemplate,
    fixed: &[String; 4],
    warnings: &[String],
    statistics: &[String],
) -> String {
    let mut out = String::new();
    for line in template.text.split_inclusive('\n') {
        if line.contains("{warnings}") && warnings.is_empty() {
            continue;
        }
        let line = line
            .replace("{dataset_context}", &fixed[0])
            .replace("{task}", &fixed[1])
            .replace("{criteria}", &fixed[2])
            .replace("{summary}", &fixed[3])
            .replace("{warnings}", &warnings.join("; "))
            .replace("{statistics}", &statistics.join("; "));
        out.push_str(&line);
    }
    out
}

/// Fills the template. Without warnings the warning line is left out.
pub fn render_prompt(
    template: &PromptTemplate,
    spec: &PromptSpec,
    stats: &StatsSummary,
    warnings: &[WarningItem],
    note_summary: &str,
) -> Prompt {
    let fixed = [
        spec.dataset_context.clone(),
        spec.task_kind.sentence().to_string(),
        spec.criteria_blurb.clone(),
        note_summary.trim().to_string(),
    ];
    let warnings: Vec<String> = warnings
        .iter()
        .map(|w| {
            format!(
                "{} {} {} {} at hour {}",
                w.variable,
                fmt_num(w.value),
                w.direction.as_str(),
                fmt_num(w.threshold),
                w.hour
            )
        })
        .collect();
    let statistics: Vec<String> = stats.variables.iter().map(stats_line).collect();
    Prompt {
        text: render_parts(template, &fixed, &warnings, &statistics),
        fixed,
        warnings,
        statistics,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub text: String,
    pub tokens: Vec<usize>,
    pub truncated: bool,
    /// `M × D` rows of the vocabulary table; `None` until embedded.
    pub embedding: Option<Tensor>,
}

impl PromptBundle {
    pub fn empty() -> Self {
        PromptBundle {
            text: String::new(),
            tokens: Vec::new(),
            truncated: false,
            embedding: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tokenizes within `budget` tokens. Over budget, statistics entries are
/// dropped from the end first, then warnings oldest first, then the token
/// tail is cut.
pub fn tokenize(
    prompt: &Prompt,
    template: &PromptTemplate,
    vocab: &Vocab,
    budget: usize,
) -> PromptBundle {
    let mut stats = prompt.statistics.clone();
    let mut warns = prompt.warnings.clone();
    let mut text = prompt.text.clone();
    let mut tokens = vocab.encode(&text);
    let mut truncated = false;
    while tokens.len() > budget && (!stats.is_empty() || !warns.is_empty()) {
        truncated = true;
        if !stats.is_empty() {
            stats.pop();
        } else {
            warns.remove(0);
        }
        text = render_parts(template, &prompt.fixed, &warns, &stats);
        tokens = vocab.encode(&text);
    }
    if tokens.len() > budget {
        truncated = true;
        tokens.truncate(budget);
    }
    PromptBundle {
        text,
        tokens,
        truncated,
        embedding: None,
    }
}

/// Looks up token rows in the `V × D` vocabulary table.
pub fn embed(bundle: &mut PromptBundle, table: &Tensor) -> Result<()> {
    let (v, d) = table.dims2();
    let mut data = Vec::with_capacity(bundle.tokens.len() * d);
    for &t in &bundle.tokens {
        if t >= v {
            return Err(Error::Config(format!(
                "token id {t} outside vocabulary table of {v} rows"
            )));
        }
        data.extend_from_slice(table.row_slice(t));
    }
    bundle.embedding = Some(Tensor::matrix(bundle.tokens.len(), d, data)?);
    Ok(())
}

/// Tokenize then embed.
pub fn tokenize_embed(
    prompt: &Prompt,
    template: &PromptTemplate,
    vocab: &Vocab,
    table: &Tensor,
    budget: usize,
) -> Result<PromptBundle> {
    let mut b = tokenize(prompt, template, vocab, budget);
    embed(&mut b, table)?;
    Ok(b)
}
