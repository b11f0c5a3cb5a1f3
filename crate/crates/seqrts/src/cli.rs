//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use seqrts_core::trial::{ParticipantTrace, TrialConfig, Unit};

use crate::config::{Config, SamplerKind};
use crate::error::{AppError, DataError};
use crate::harness::{self, CompareSetup, Estimator, SamplerSpec, TuneSetup};
use crate::model_io::ModelDocument;
use crate::output::{metrics_csv, pretty_json, summary_json, tune_csv, OutputDir};
use crate::trace_io::{read_traces, traces_to_string};

#[derive(Debug, Parser)]
#[command(name = "seqrts", version, about = "Sequential risk-time sampling: simulate, evaluate and tune")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed for the command's simulated cohort.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "RISK_SAMPLER_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Fitted model file; fitted from the history corpus when absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Disable the notification lockout.
    #[arg(long)]
    pub no_lockout: bool,
    /// Enable the hour-conversion fault with this study start hour (GMT).
    #[arg(long = "fault.start_hour_gmt")]
    pub fault_start_hour_gmt: Option<i32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the remaining-risk model on a historical corpus.
    FitGhat {
        #[command(flatten)]
        common: Common,
        /// Fit on this trace CSV instead of a simulated corpus.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Simulate the cohort and write traces, metrics and a summary.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_enum)]
        sampler: Option<SamplerKind>,
        /// Budget N̂₀ for the SeqRTS sampler.
        #[arg(long)]
        n0: Option<f64>,
    },
    /// Compute metrics and a summary for an existing trace CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trace CSV to evaluate; falls back to `io.trace_csv`.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Grid-search N̂₀ on the tuning cohort.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Compare the oracle with SeqRTS on paired simulations.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunFlags,
        /// Budget N̂₀ for the SeqRTS arm.
        #[arg(long)]
        n0: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::FitGhat { common, .. }
            | Command::Simulate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Tune { common, .. }
            | Command::Compare { common, .. } => common,
        }
    }
}

/// Parse, run, and map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    let threads = cli.command.common().threads;
    match threads {
        Some(0) => Err(AppError::Config(seqrts_core::trial::ConfigError::new("--threads", "must be at least 1"))),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| AppError::Invariant(format!("thread pool: {e}")))?;
            pool.install(|| dispatch(cli.command))
        }
        None => dispatch(cli.command),
    }
}

fn dispatch(command: Command) -> Result<(), AppError> {
    match command {
        Command::FitGhat { common, traces } => fit_ghat(&common, traces),
        Command::Simulate { common, run, sampler, n0 } => simulate(&common, &run, sampler, n0),
        Command::Evaluate { common, traces } => evaluate(&common, traces),
        Command::Tune { common, run } => tune(&common, &run),
        Command::Compare { common, run, n0 } => compare(&common, &run, n0),
    }
}

fn load_config(common: &Common) -> Result<Config, AppError> {
    Ok(match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    })
}

fn apply_run_flags(cfg: &mut Config, run: &RunFlags) {
    if let Some(model) = &run.model {
        cfg.io.model = Some(model.clone());
    }
    if run.no_lockout {
        cfg.cohort.lockout = false;
    }
    if let Some(h) = run.fault_start_hour_gmt {
        cfg.fault.enabled = true;
        cfg.fault.start_hour_gmt = h;
    }
}

fn load_trace_file(path: &Path, trial: &TrialConfig) -> Result<Vec<ParticipantTrace>, AppError> {
    let file = std::fs::File::open(path).map_err(|e| AppError::io(path.display(), e))?;
    let loaded = read_traces(std::io::BufReader::new(file), trial).map_err(|e| e.in_file(path))?;
    for w in &loaded.warnings {
        log::warn!("{}: {w:?}", path.display());
    }
    Ok(loaded.traces)
}

/// Fit on the configured trace CSV, or on a simulated history corpus.
fn fit_document(cfg: &Config) -> Result<ModelDocument, AppError> {
    let mode = cfg.history.horizon_mode;
    let (traces, seed, source) = match &cfg.io.trace_csv {
        Some(path) => (load_trace_file(path, &cfg.trial)?, None, path.display().to_string()),
        None => (harness::history_traces(&cfg.history_sim()), Some(cfg.history.seed), "simulated".to_string()),
    };
    if traces.is_empty() {
        return Err(DataError::new("empty fitting corpus").into());
    }
    harness::fit_model(&traces, &cfg.trial, mode, seed, &source).map_err(|e| DataError::new(format!("fit failed: {e}")).into())
}

fn model_document(cfg: &Config) -> Result<ModelDocument, AppError> {
    match &cfg.io.model {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path.display(), e))?;
            Ok(ModelDocument::from_json(&text).map_err(|e| e.in_file(path))?)
        }
        None => {
            log::info!("no model given; fitting on the history corpus");
            fit_document(cfg)
        }
    }
}

fn fit_ghat(common: &Common, traces: Option<PathBuf>) -> Result<(), AppError> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.history.seed = seed;
    }
    if traces.is_some() {
        cfg.io.trace_csv = traces;
    }
    cfg.validate()?;
    let doc = fit_document(&cfg)?;
    println!("corpus: {} participant-days, {} sedentary runs", doc.metadata.participant_days, doc.metadata.runs);
    let coverage: Vec<String> = doc.model.run_lengths.strata().iter().map(|s| format!("{}:{}", s.k, s.m)).collect();
    println!("per-k coverage (k:m_k): {}", coverage.join(" "));
    let mut out = OutputDir::create(&common.out)?;
    out.write("ghat.json", &doc.to_json())?;
    out.finish("fit-ghat", cfg.history.seed, &cfg)
}

fn included_counts(sel: &seqrts_core::trial::Selection, trial: &TrialConfig) -> BTreeMap<String, usize> {
    trial
        .units()
        .map(|u| {
            let name = match u {
                Unit::Day => "day".to_string(),
                Unit::Block(j) => format!("block_{j}"),
            };
            (name, sel.count(u))
        })
        .collect()
}

fn write_evaluation(out: &mut OutputDir, traces: &[ParticipantTrace], cfg: &Config) -> Result<(), AppError> {
    let fault = cfg.active_fault();
    let ev = harness::evaluate(traces, &cfg.trial, fault.as_ref()).map_err(|e| DataError::new(e.to_string()))?;
    out.write("metrics.csv", &metrics_csv(&ev.metrics))?;
    out.write("summary.json", &summary_json(&ev.summary, &included_counts(&ev.selection, &cfg.trial)))?;
    for u in &ev.summary.units {
        if let Some(y) = u.treatments {
            println!("{:?}: {} units, mean treatments {:.4}", u.unit, y.n_units, y.mean);
        }
    }
    Ok(())
}

fn simulate(common: &Common, run: &RunFlags, sampler: Option<SamplerKind>, n0: Option<f64>) -> Result<(), AppError> {
    let mut cfg = load_config(common)?;
    apply_run_flags(&mut cfg, run);
    if let Some(seed) = common.seed {
        cfg.cohort.seed = seed;
    }
    if let Some(kind) = sampler {
        cfg.sampler.kind = kind;
    }
    if let Some(n0) = n0 {
        cfg.sampler.n0_hat = n0;
    }
    cfg.validate()?;

    let trial = &cfg.trial;
    let estimator = match cfg.sampler.kind {
        SamplerKind::Seqrts => Some(Estimator::Model(model_document(&cfg)?.model)),
        _ => None,
    };
    let spec = match (cfg.sampler.kind, &estimator) {
        (SamplerKind::Seqrts, Some(est)) => SamplerSpec::seqrts(cfg.sampler.n0_hat, trial, cfg.sampler.clip, cfg.active_fault(), est),
        (SamplerKind::Oracle, _) => SamplerSpec::Oracle { goal: trial.budget_goal_per_block },
        _ => SamplerSpec::Fixed { p: cfg.sampler.fixed_prob },
    };
    let sim = cfg.cohort_sim();
    let pre = harness::cohort_traces(&sim);
    let outcomes = harness::run_cohort(&pre, &spec, trial, sim.seed, cfg.cohort.lockout);
    let stats = harness::check_invariants(&outcomes, &spec, trial, cfg.cohort.lockout).map_err(AppError::Invariant)?;
    log::info!("invariants hold over {} risk times in {} blocks", stats.risk_times, stats.blocks_checked);

    // metrics come from the written file so that `evaluate` on it reproduces them exactly
    let done: Vec<ParticipantTrace> = outcomes.into_iter().map(|o| o.trace).collect();
    let text = traces_to_string(&done);
    let reloaded = read_traces(text.as_bytes(), trial).map_err(|e| AppError::Invariant(format!("trace roundtrip: {e}")))?;
    let mut out = OutputDir::create(&common.out)?;
    out.write("traces.csv", &text)?;
    write_evaluation(&mut out, &reloaded.traces, &cfg)?;
    out.finish("simulate", cfg.cohort.seed, &cfg)
}

fn evaluate(common: &Common, traces: Option<PathBuf>) -> Result<(), AppError> {
    let mut cfg = load_config(common)?;
    if traces.is_some() {
        cfg.io.trace_csv = traces;
    }
    cfg.validate()?;
    let path = cfg
        .io
        .trace_csv
        .clone()
        .ok_or_else(|| seqrts_core::trial::ConfigError::new("io.trace_csv", "no trace CSV given (use --traces)"))?;
    let traces = load_trace_file(&path, &cfg.trial)?;
    let mut out = OutputDir::create(&common.out)?;
    write_evaluation(&mut out, &traces, &cfg)?;
    out.finish("evaluate", cfg.cohort.seed, &cfg)
}

fn tune(common: &Common, run: &RunFlags) -> Result<(), AppError> {
    let mut cfg = load_config(common)?;
    apply_run_flags(&mut cfg, run);
    if let Some(seed) = common.seed {
        cfg.tune.seed = seed;
    }
    cfg.validate()?;
    let estimator = Estimator::Model(model_document(&cfg)?.model);
    let sim = cfg.tune_sim();
    let report = harness::tune_n0(&TuneSetup {
        sim: &sim,
        grid: &cfg.tune.n0_grid,
        estimator: &estimator,
        clip: cfg.sampler.clip,
        fault: cfg.active_fault(),
        lockout: cfg.cohort.lockout,
    })
    .map_err(|e| DataError::new(e.to_string()))?;
    println!("best n0_hat: {}", report.best_n0_hat);
    let mut out = OutputDir::create(&common.out)?;
    out.write("tune.csv", &tune_csv(&report))?;
    out.write("tune.json", &pretty_json(&report))?;
    out.finish("tune", cfg.tune.seed, &cfg)
}

fn compare(common: &Common, run: &RunFlags, n0: Option<f64>) -> Result<(), AppError> {
    let mut cfg = load_config(common)?;
    apply_run_flags(&mut cfg, run);
    if let Some(seed) = common.seed {
        cfg.cohort.seed = seed;
    }
    if let Some(n0) = n0 {
        cfg.sampler.n0_hat = n0;
    }
    cfg.validate()?;
    let estimator = Estimator::Model(model_document(&cfg)?.model);
    let sim = cfg.cohort_sim();
    let report = harness::compare_oracle_vs_seqrts(&CompareSetup {
        sim: &sim,
        replications: cfg.tune.replications,
        n0_hat: cfg.sampler.n0_hat,
        estimator: &estimator,
        clip: cfg.sampler.clip,
        fault: cfg.active_fault(),
        lockout: cfg.cohort.lockout,
    })
    .map_err(|e| DataError::new(e.to_string()))?;
    for s in &report.samplers {
        if let Some(y) = s.pooled().treatments {
            println!("{}: mean block treatments {:.4} over {} blocks", s.sampler, y.mean, y.n_units);
        }
    }
    let mut out = OutputDir::create(&common.out)?;
    out.write("compare.json", &pretty_json(&report))?;
    out.finish("compare", cfg.cohort.seed, &cfg)
}
