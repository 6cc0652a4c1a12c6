//! `sepsiswarn`: cohort preparation, scoring, training, evaluation,
//! ablations and horizon sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
//! Failures print one JSON object on stderr.

mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sepsis_core::clinscore::{score_at, Criterion, HourlyObservation, DEFAULT_SOFA_LOOKBACK};
use sepsis_core::cohort::{
    default_variables, generate_synthetic, ingest_csv, load_cohort, load_specs, read_record_csv, save_cohort, split,
    CohortConfig, CsvSchema, Split,
};
use sepsis_core::evalx::{mean_saliency, metrics_csv, mse_table, roc_csv, saliency};
use sepsis_core::pipeline::{
    evaluate, run_ablation_suite, run_horizon_sweep, train_task, AblationFlags, Model, RunConfig, TaskSpec,
};
use sepsis_core::Error;

use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Parser)]
#[command(name = "sepsiswarn", version, about = "Predict-then-classify sepsis early warning")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a cohort directory.
    #[command(subcommand)]
    Cohort(CohortCommand),
    /// Clinical scores per hour of one record CSV.
    Score(ScoreArgs),
    /// Train stage 1 and stage 2 for each task offset.
    Train(TrainArgs),
    /// Write a report for a trained run.
    Eval(EvalArgs),
    /// Full model and single-component removals across offsets.
    Ablate(AblateArgs),
    /// Retrain per forecast horizon and report MSE and ROC per cell.
    SweepHorizon(SweepArgs),
}

#[derive(Subcommand)]
enum CohortCommand {
    /// Seeded synthetic cohort.
    Gen(GenArgs),
    /// Cohort from a long-format event CSV.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct Common {
    /// Replace an existing output.
    #[arg(long)]
    overwrite: bool,
    /// Worker threads for per-record evaluation.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    /// Generator settings (JSON); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    split: [f64; 3],
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = parse_ratios)]
    split: [f64; 3],
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Record CSV (`variable,<hour>…`).
    #[arg(long)]
    record: PathBuf,
    /// Variable table (JSON); the shipped table when absent.
    #[arg(long)]
    specs: Option<PathBuf>,
    #[arg(long, default_value = "sofa,sirs,qsofa,mews", value_delimiter = ',')]
    criteria: Vec<Criterion>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    /// Run configuration (JSON); flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    task_offsets: Option<Vec<i64>>,
    #[arg(long)]
    horizon: Option<i64>,
    /// `all`, or a comma list of no-summary, no-patching, no-prior, no-st.
    #[arg(long)]
    flags: Option<AblationFlags>,
    #[arg(long)]
    seed: Option<u64>,
    /// One model for all offsets.
    #[arg(long)]
    shared_model: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Metrics,
    Roc,
    Mse,
    Saliency,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    report: Report,
    /// Fail when the cohort no longer matches the manifest digests.
    #[arg(long)]
    verify: bool,
    /// MSE in raw units instead of normalized.
    #[arg(long)]
    raw: bool,
    /// Task offset for the saliency report; the first trained one by default.
    #[arg(long)]
    offset: Option<i64>,
    /// Saliency of one stay instead of the test-split mean.
    #[arg(long)]
    record: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<i64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    shared_model: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "h", value_delimiter = ',', default_value = "1,2,3,4")]
    horizons: Vec<i64>,
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<i64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    shared_model: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated fractions".to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) | Error::UnknownParam(_) => (1, "config"),
            Error::Divergence(_) => (3, "divergence"),
            Error::Shape { .. } | Error::ContextOverflow { .. } | Error::Agent(_) => (3, "training"),
            _ => (2, "data"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Error::io(path, e).into()
}

/// Refuses to replace `path` unless `overwrite`. Directories are only
/// removed when they hold one of our artifacts.
fn claim_dir(path: &Path, overwrite: bool) -> CliResult<()> {
    if path.exists() {
        let occupied = fs::read_dir(path).map_err(|e| io_fail(path, e))?.next().is_some();
        if occupied {
            if !overwrite {
                return Err(Failure::usage(format!(
                    "{} exists; pass --overwrite to replace it",
                    path.display()
                )));
            }
            let ours = path.join(MANIFEST_FILE).exists() || path.join("cohort.json").exists();
            if !ours {
                return Err(Failure::usage(format!(
                    "{} is not a run or cohort directory; refusing to remove it",
                    path.display()
                )));
            }
            fs::remove_dir_all(path).map_err(|e| io_fail(path, e))?;
        }
    }
    fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn claim_file(path: &Path, overwrite: bool) -> CliResult<()> {
    if path.exists() && !overwrite {
        return Err(Failure::usage(format!(
            "{} exists; pass --overwrite to replace it",
            path.display()
        )));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_fail(parent, e))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure {
        code: 1,
        kind: "config",
        message: format!("{}: {e}", path.display()),
    })
}

fn run_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

fn cohort_gen(a: GenArgs) -> CliResult<()> {
    let config: CohortConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CohortConfig::default(),
    };
    claim_dir(&a.out, a.overwrite)?;
    let cohort = split(generate_synthetic(&config, a.seed)?, a.split, a.seed)?;
    save_cohort(&cohort, &a.out)?;
    log::info!("{} records, {} positive", cohort.records.len(), cohort.n_positive());
    Ok(())
}

fn cohort_ingest(a: IngestArgs) -> CliResult<()> {
    let schema = CsvSchema::load(&a.schema)?;
    let (cohort, report) = ingest_csv(&a.events, &schema)?;
    claim_dir(&a.out, a.overwrite)?;
    let cohort = split(cohort, a.split, schema.seed)?;
    save_cohort(&cohort, &a.out)?;
    let path = a.out.join("ingest_report.json");
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write(&path, &(text + "\n"))?;
    Ok(())
}

fn score(a: ScoreArgs) -> CliResult<()> {
    let specs = match &a.specs {
        Some(p) => load_specs(p)?,
        None => default_variables(),
    };
    let m = read_record_csv(&a.record, &specs)?;
    claim_file(&a.out, a.overwrite)?;
    let series = HourlyObservation::series(&m, &specs);
    let mut s = String::from("hour");
    for c in &a.criteria {
        let _ = write!(s, ",{}", c.name());
    }
    s.push('\n');
    for col in 0..m.n_hours() {
        let _ = write!(s, "{}", m.start_hour + col as i64);
        for &c in &a.criteria {
            let _ = write!(s, ",{}", score_at(&series, col, c, DEFAULT_SOFA_LOOKBACK)?.total);
        }
        s.push('\n');
    }
    write(&a.out, &s)
}

fn model_dir(run: &Path, task: Option<TaskSpec>) -> PathBuf {
    match task {
        Some(t) => run.join("models").join(t.to_string()),
        None => run.join("models").join("shared"),
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(o) = a.task_offsets {
        cfg.offsets = o;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(f) = a.flags {
        cfg.flags = f;
    }
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(j) = a.common.jobs {
        cfg.train.jobs = j;
    }
    cfg.shared_model |= a.shared_model;
    cfg.cohort = Some(a.cohort.clone());
    let seed = *cfg.seeds.first().ok_or_else(|| Failure::usage("no seed given"))?;
    if cfg.seeds.len() > 1 {
        return Err(Failure::usage("train takes one seed; use ablate for several"));
    }
    let tasks = cfg.tasks()?;
    let cohort = load_cohort(&a.cohort)?;
    claim_dir(&a.out, a.common.overwrite)?;
    let mut manifest = RunManifest::new("train", cfg.clone(), &a.cohort)?;
    let groups: Vec<(Option<TaskSpec>, Vec<TaskSpec>)> = if cfg.shared_model {
        vec![(None, tasks.clone())]
    } else {
        tasks.iter().map(|&t| (Some(t), vec![t])).collect()
    };
    for (key, group) in groups {
        let model = train_task(&cohort, &group, &cfg.model, &cfg.train, cfg.flags, seed)?;
        let dir = model_dir(&a.out, key);
        model.save(&dir)?;
        manifest.outputs.push(dir.strip_prefix(&a.out).unwrap_or(&dir).display().to_string());
    }
    manifest.save(&a.out)?;
    Ok(())
}

fn load_models(run: &Path, m: &RunManifest) -> CliResult<Vec<(TaskSpec, Model)>> {
    let tasks = m.config.tasks()?;
    if m.config.shared_model {
        let dir = model_dir(run, None);
        tasks.iter().map(|&t| Ok((t, Model::load(&dir)?))).collect()
    } else {
        tasks.iter().map(|&t| Ok((t, Model::load(&model_dir(run, Some(t)))?))).collect()
    }
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let m = RunManifest::load(&a.run)?;
    if m.command != "train" {
        return Err(Failure::usage(format!("{} holds a `{}` run, not a trained model", a.run.display(), m.command)));
    }
    if a.verify {
        let drift = m.drift()?;
        if !drift.is_empty() {
            return Err(Error::Data(format!("cohort changed since training: {}", drift.join(", "))).into());
        }
    }
    let cohort = load_cohort(&m.input_root)?;
    let jobs = a.common.jobs.unwrap_or(m.config.train.jobs);
    let models = load_models(&a.run, &m)?;
    claim_file(&a.out, a.common.overwrite)?;
    let text = match a.report {
        Report::Metrics => {
            let evals = models
                .iter()
                .map(|(t, model)| evaluate(model, &cohort, Split::Test, *t, jobs))
                .collect::<Result<Vec<_>, _>>()?;
            metrics_csv(&evals)
        }
        Report::Roc => {
            let mut s = String::from("offset,horizon,threshold,fpr,tpr\n");
            for (t, model) in &models {
                let e = evaluate(model, &cohort, Split::Test, *t, jobs)?;
                for line in roc_csv(&e.roc).lines().skip(1) {
                    let _ = writeln!(s, "{},{},{line}", t.offset_k, t.horizon);
                }
            }
            s
        }
        Report::Mse => {
            let mut out = String::new();
            for (i, (t, model)) in models.iter().enumerate() {
                let table = mse_table(model, &cohort, &[*t], None, jobs)?;
                let csv = table.to_csv(a.raw);
                let skip = usize::from(i > 0);
                for line in csv.lines().skip(skip) {
                    out.push_str(line);
                    out.push('\n');
                }
            }
            out
        }
        Report::Saliency => {
            let (t, model) = match a.offset {
                Some(k) => models
                    .iter()
                    .find(|(t, _)| t.offset_k == k)
                    .ok_or_else(|| Failure::usage(format!("offset {k} was not trained in this run")))?,
                None => models.first().ok_or_else(|| Failure::usage("run has no models"))?,
            };
            let map = match &a.record {
                Some(id) => {
                    let r = cohort
                        .records
                        .iter()
                        .find(|r| &r.stay_id == id)
                        .ok_or_else(|| Error::Data(format!("no stay `{id}` in the cohort")))?;
                    saliency(model, r, *t)?
                }
                None => mean_saliency(model, &cohort, Split::Test, *t, jobs)?,
            };
            if map.untrained {
                log::warn!("classifier untrained; saliency is not meaningful");
            }
            map.to_csv()
        }
    };
    write(&a.out, &text)
}

fn default_offsets(o: Option<Vec<i64>>, cfg: &RunConfig) -> Vec<i64> {
    o.unwrap_or_else(|| cfg.offsets.clone())
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let mut cfg = run_config(a.config.as_deref())?;
    cfg.offsets = default_offsets(a.offsets, &cfg);
    cfg.seeds = a.seeds;
    cfg.shared_model |= a.shared_model;
    cfg.cohort = Some(a.cohort.clone());
    if let Some(j) = a.common.jobs {
        cfg.train.jobs = j;
    }
    let cohort = load_cohort(&a.cohort)?;
    claim_dir(&a.out, a.common.overwrite)?;
    let mut manifest = RunManifest::new("ablate", cfg.clone(), &a.cohort)?;
    let report = run_ablation_suite(&cohort, &cfg.offsets, &cfg.seeds, &cfg.model, &cfg.train, cfg.shared_model)?;
    write(&a.out.join("ablation.csv"), &report.to_csv())?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write(&a.out.join("ablation.json"), &(text + "\n"))?;
    manifest.outputs = vec!["ablation.csv".into(), "ablation.json".into()];
    manifest.save(&a.out)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let mut cfg = run_config(a.config.as_deref())?;
    cfg.offsets = default_offsets(a.offsets, &cfg);
    cfg.seeds = vec![a.seed];
    cfg.shared_model |= a.shared_model;
    cfg.cohort = Some(a.cohort.clone());
    if let Some(j) = a.common.jobs {
        cfg.train.jobs = j;
    }
    let cohort = load_cohort(&a.cohort)?;
    claim_dir(&a.out, a.common.overwrite)?;
    let mut manifest = RunManifest::new("sweep-horizon", cfg.clone(), &a.cohort)?;
    let report = run_horizon_sweep(&cohort, &a.horizons, &cfg.offsets, a.seed, &cfg.model, &cfg.train, cfg.shared_model)?;
    write(&a.out.join("horizon.csv"), &report.to_csv())?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write(&a.out.join("horizon.json"), &(text + "\n"))?;
    manifest.outputs = vec!["horizon.csv".into(), "horizon.json".into()];
    let roc_dir = a.out.join("roc");
    fs::create_dir_all(&roc_dir).map_err(|e| io_fail(&roc_dir, e))?;
    for c in &report.cells {
        let name = format!("roc/h{}_k{}.csv", c.horizon, c.offset);
        write(&a.out.join(&name), &roc_csv(&c.roc))?;
        manifest.outputs.push(name);
    }
    manifest.save(&a.out)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Cohort(CohortCommand::Gen(a)) => cohort_gen(a),
        Command::Cohort(CohortCommand::Ingest(a)) => cohort_ingest(a),
        Command::Score(a) => score(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepHorizon(a) => sweep(a),
    }
}

fn fail(f: Failure) -> ExitCode {
    let body = json!({ "error": { "kind": f.kind, "message": f.message, "exit_code": f.code } });
    eprintln!("{body}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail(Failure::usage(e.to_string().trim().to_string()));
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
