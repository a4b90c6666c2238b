//! `ocmlab` command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocmlab::harness::{
    diagnostics, evaluate_nll, evaluate_reconstruction, is_theorem1_family, parse_ndjson, presets,
    resume_experiment, run_experiment, to_ndjson, Checkpoint, ExperimentConfig, Learner, Record,
    METRICS_FILE,
};
use ocmlab::stream::formats::{read_delimited, write_delimited};
use ocmlab::stream::{Dataset, SyntheticSpec};
use ocmlab::{Error, Result};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "ocmlab",
    version,
    about = "Streaming replay-memory experiments and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config or a named preset.
    Run(RunArgs),
    /// Evaluate a checkpoint on test data.
    Eval(EvalArgs),
    /// Bound diagnostics for a checkpoint against per-class targets.
    Diag(DiagArgs),
    /// Write a synthetic Gaussian-mixture dataset as CSV files.
    GenData(GenArgs),
    /// Print a JSON summary of a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    config: Option<PathBuf>,
    /// Preset name instead of a config file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long, conflicts_with_all = ["config", "preset", "seed"])]
    resume: Option<PathBuf>,
    /// Records emitted before the checkpoint (defaults to the output
    /// directory's metrics file when it exists).
    #[arg(long, requires = "resume")]
    prior: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Test data as CSV; the checkpoint's own test split when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Importance samples for the log-likelihood estimate.
    #[arg(long, short, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DiagArgs {
    checkpoint: PathBuf,
    /// Target data as labelled CSV; the checkpoint's test split when absent.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Rows per target class.
    #[arg(long)]
    per_target: Option<usize>,
    /// Require the Gaussian decoder with σ = 1/√2 so the ELBO transport
    /// fields are filled in.
    #[arg(long)]
    theorem1: bool,
    /// Write records here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 4)]
    modes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 500)]
    n_per_mode: usize,
    #[arg(long, default_value_t = 100)]
    n_test_per_mode: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for train.csv and test.csv.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Diag(a) => diag(a),
        Command::GenData(a) => gen_data(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Writes to stdout; a closed pipe (`ocmlab inspect ... | head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &serde_json::Value) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(v).expect("json values serialize")
    ));
}

fn run(a: RunArgs) -> Result<()> {
    let out = if let Some(path) = &a.resume {
        let mut ck = Checkpoint::load(path)?;
        if let Some(dir) = &a.output {
            ck.config.output_dir = Some(dir.clone());
        }
        let prior_path = a.prior.clone().or_else(|| {
            ck.config
                .output_dir
                .as_ref()
                .map(|d| d.join(METRICS_FILE))
                .filter(|p| p.exists())
        });
        let prior = match prior_path {
            Some(p) => parse_ndjson(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        if prior.len() < ck.records_emitted {
            return Err(Error::Input(format!(
                "checkpoint was taken after {} records but only {} prior records were found",
                ck.records_emitted,
                prior.len()
            )));
        }
        resume_experiment(ck, &prior)?
    } else {
        let mut cfg = match (&a.config, &a.preset) {
            (Some(p), None) => ExperimentConfig::load(p)?,
            (None, Some(name)) => presets::by_name(name, a.seed.unwrap_or(0)).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; known: {}",
                    presets::NAMES.join(", ")
                ))
            })?,
            _ => return Err(Error::Config("give a config file or --preset".into())),
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(dir) = &a.output {
            cfg.output_dir = Some(dir.clone());
        }
        run_experiment(&cfg)?
    };
    let fin = out.final_record();
    print_json(&json!({
        "name": out.checkpoint.config.name,
        "records": out.records.len(),
        "output_dir": out.output_dir,
        "final": fin,
    }));
    Ok(())
}

/// Test data from a CSV file or the checkpoint's own stream.
fn test_data(ck: &Checkpoint, path: Option<&Path>) -> Result<Dataset> {
    let ds = match path {
        Some(p) => read_delimited(p)?,
        None => ck.config.stream.build(ck.config.seed)?.test,
    };
    if ds.is_empty() {
        return Err(Error::Input("test data is empty".into()));
    }
    Ok(ds)
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let test = test_data(&ck, a.data.as_deref())?;
    let n = test.len();
    let v = match &ck.learner {
        Learner::Classifier(c) => {
            let labels = test
                .labels
                .as_deref()
                .ok_or_else(|| Error::Config("classifier evaluation needs labelled data".into()))?;
            json!({ "samples": n, "accuracy": c.accuracy(&test.samples, labels)? })
        }
        learner => json!({
            "samples": n,
            "m": a.m,
            "log_likelihood": evaluate_nll(learner, &test.samples, a.m, a.seed)?,
            "reconstruction": evaluate_reconstruction(learner, &test.samples)?,
        }),
    };
    print_json(&v);
    Ok(())
}

fn diag(a: DiagArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let views = ck.learner.views();
    if views.is_empty() {
        return Err(Error::Config(
            "diagnostics need a generative learner".into(),
        ));
    }
    if a.theorem1 && !views.iter().all(|v| is_theorem1_family(v.family())) {
        return Err(Error::Config(format!(
            "the ELBO transport report needs a gaussian decoder with sigma = 1/sqrt(2), checkpoint has {:?}",
            views[0].family()
        )));
    }
    let test = test_data(&ck, a.targets.as_deref())?;
    let per_target = a.per_target.unwrap_or(ck.config.eval.diag_samples);
    // Records carry the index of the last batch the checkpoint consumed.
    let records: Vec<Record> = diagnostics(
        &ck.learner,
        &ck.memory.long_term().samples(),
        &test,
        per_target,
        ck.cursor.saturating_sub(1) as u64,
        &ck.config.eval.diag,
    )?;
    let text = to_ndjson(&records)?;
    match &a.output {
        Some(p) => std::fs::write(p, text)?,
        None => emit(&text),
    }
    Ok(())
}

fn gen_data(a: GenArgs) -> Result<()> {
    let spec = SyntheticSpec {
        modes: a.modes,
        dim: a.dim,
        n_per_mode: a.n_per_mode,
        n_test_per_mode: a.n_test_per_mode,
        separation: a.separation,
        offset: a.offset,
        seed: a.seed,
    };
    let (train, test) = spec.generate()?;
    std::fs::create_dir_all(&a.output)?;
    let train_path = a.output.join("train.csv");
    let test_path = a.output.join("test.csv");
    std::fs::write(&train_path, write_delimited(&train))?;
    std::fs::write(&test_path, write_delimited(&test))?;
    print_json(&json!({
        "train": train_path,
        "test": test_path,
        "train_rows": train.len(),
        "test_rows": test.len(),
        "dim": a.dim,
    }));
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let kind = match &ck.learner {
        Learner::Single(_) => "single",
        Learner::Mixture(_) => "mixture",
        Learner::Classifier(_) => "classifier",
    };
    let expansions: Vec<_> = match &ck.learner {
        Learner::Mixture(m) => m
            .events
            .iter()
            .map(|e| {
                json!({
                    "step": e.step_index,
                    "components_after": e.components_after,
                    "r_i": e.r_i,
                    "r_last": e.r_last,
                    "memory_rows": e.memory.rows(),
                })
            })
            .collect(),
        _ => Vec::new(),
    };
    print_json(&json!({
        "format_version": ck.format_version,
        "name": ck.config.name,
        "seed": ck.config.seed,
        "learner": kind,
        "components": ck.learner.component_count(),
        "digests": ck.learner.digests(),
        "cursor": ck.cursor,
        "samples_seen": ck.samples_seen,
        "cycles": ck.cycles,
        "eval_points": ck.eval_points,
        "records_emitted": ck.records_emitted,
        "stm_size": ck.memory.short_term_len(),
        "ltm_size": ck.memory.long_term().len(),
        "expansions": expansions,
    }));
    Ok(())
}
