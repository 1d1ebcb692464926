//! Command-line driver.
//!
//! A run directory holds `history.csv`, `evaluations.jsonl`,
//! `checkpoint.json` (rewritten after every generation) and, once the run
//! ends, `result.json`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cellgrow_core::engine::{Engine, EngineState, EvaluationRecord, GenerationReport, RunStatus};
use cellgrow_core::genome::{decode, Genotype};
use cellgrow_core::search_space::{builtin_space, BuiltinSpace, SearchSpace};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, checkpoint, CheckpointError};
use crate::config::{load_config, ConfigError, RunConfig};
use crate::evaluators::build_evaluator;
use crate::history::{self, HistoryRow};

pub const RESULT_FILE: &str = "result.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVALUATIONS_FILE: &str = "evaluations.jsonl";

pub const EXIT_SATISFIED: u8 = 0;
pub const EXIT_FAULT: u8 = 1;
pub const EXIT_LIMIT: u8 = 2;
/// `--stop-after` ended the invocation before the run finished.
pub const EXIT_PAUSED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "cellgrow", version, about = "Grow neural architectures from minimal genotypes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a run from a config file.
    Evolve(EvolveArgs),
    /// Continue a run from its checkpoint.
    Resume(ResumeArgs),
    /// Decode a genotype and print its size.
    Inspect(InspectArgs),
    /// Reformat a history log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct EvolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `run.out`; defaults to `./run`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many generations, leaving a resumable checkpoint.
    #[arg(long)]
    pub stop_after: Option<u32>,
}

#[derive(Debug, Args)]
pub struct ResumeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stop_after: Option<u32>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Genotype JSON (a bare genotype or a `result.json`).
    #[arg(long)]
    pub genotype: PathBuf,
    /// Take the space and input shape from this run config.
    #[arg(long, conflicts_with = "space")]
    pub config: Option<PathBuf>,
    /// Built-in space name (default cnn).
    #[arg(long)]
    pub space: Option<String>,
    /// Comma-separated input shape, e.g. `3,32,32`.
    #[arg(long, value_delimiter = ',')]
    pub input_shape: Option<Vec<u32>>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long, required_unless_present = "json", conflicts_with = "json")]
    pub csv: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("engine: {0}")]
    Engine(#[from] cellgrow_core::engine::EngineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Input(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Contents of `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub status: RunStatus,
    pub generations: u32,
    pub seed: u64,
    pub best: Genotype,
    pub summary: Option<Summary>,
}

/// Size of a decoded genotype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cells: u32,
    pub cell_counts: std::collections::BTreeMap<String, u32>,
    pub layers: u32,
    pub parameters: u64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let by_type: Vec<String> = self.cell_counts.iter().map(|(k, v)| format!("{k} {v}")).collect();
        writeln!(f, "cells: {} ({})", self.cells, by_type.join(", "))?;
        writeln!(f, "layers: {}", self.layers)?;
        write!(f, "parameters: {}", self.parameters)
    }
}

pub fn summarize(genotype: &Genotype, space: &SearchSpace, input_shape: &[u32]) -> Result<Summary, CliError> {
    let p = decode(genotype, space, input_shape).map_err(|e| CliError::Input(format!("cannot decode genotype: {e}")))?;
    Ok(Summary {
        cells: p.derived.cell_counts.values().sum(),
        cell_counts: p.derived.cell_counts,
        layers: p.derived.layer_count,
        parameters: p.derived.parameter_count,
    })
}

#[derive(Serialize, Deserialize)]
struct EvaluationLine {
    generation: u32,
    #[serde(flatten)]
    record: EvaluationRecord,
}

/// Files of a run directory, kept in step with the engine.
struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Makes the logs agree with `state`, dropping anything written after
    /// the checkpoint was taken.
    fn reset(&self, state: &EngineState) -> Result<(), CliError> {
        fs::create_dir_all(&self.dir).map_err(io_at(&self.dir))?;
        let h = self.path(HISTORY_FILE);
        history::write_history(&h, &state.history).map_err(io_at(&h))?;
        let e = self.path(EVALUATIONS_FILE);
        let kept = match File::open(&e) {
            Ok(file) => {
                let mut kept = String::new();
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(io_at(&e))?;
                    match serde_json::from_str::<EvaluationLine>(&line) {
                        Ok(l) if l.generation < state.generation => {
                            kept.push_str(&line);
                            kept.push('\n');
                        }
                        _ => {}
                    }
                }
                kept
            }
            Err(err) if err.kind() == io::ErrorKind::NotFound => String::new(),
            Err(err) => return Err(io_at(&e)(err)),
        };
        fs::write(&e, kept).map_err(io_at(&e))?;
        let r = self.path(RESULT_FILE);
        if r.exists() {
            fs::remove_file(&r).map_err(io_at(&r))?;
        }
        Ok(())
    }

    fn record(&self, config: &RunConfig, state: &EngineState, report: &GenerationReport) -> Result<(), CliError> {
        let h = self.path(HISTORY_FILE);
        history::append_history(&h, &report.record).map_err(io_at(&h))?;
        let e = self.path(EVALUATIONS_FILE);
        let mut file = OpenOptions::new().append(true).create(true).open(&e).map_err(io_at(&e))?;
        let mut buf = String::new();
        for record in &report.evaluations {
            let line = EvaluationLine { generation: report.record.generation, record: *record };
            buf.push_str(&serde_json::to_string(&line).expect("evaluation lines serialize"));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(io_at(&e))?;
        let c = self.path(CHECKPOINT_FILE);
        checkpoint::save(&c, &checkpoint(config, state)).map_err(io_at(&c))
    }

    fn finish(&self, config: &RunConfig, engine: &Engine) -> Result<RunStatus, CliError> {
        let result = engine.result().expect("finished run has a result");
        let summary = config.input_shape.as_deref().and_then(|s| summarize(&result.best, &config.space, s).ok());
        let doc = ResultDocument {
            status: result.status,
            generations: result.generations,
            seed: config.engine.seed,
            best: result.best,
            summary,
        };
        let r = self.path(RESULT_FILE);
        let text = serde_json::to_string_pretty(&doc).expect("result serializes");
        fs::write(&r, text + "\n").map_err(io_at(&r))?;
        Ok(doc.status)
    }
}

fn drive(config: RunConfig, state: Option<EngineState>, out: PathBuf, stop_after: Option<u32>) -> Result<u8, CliError> {
    let evaluator = build_evaluator(&config)?;
    let mut engine = match state {
        Some(state) => Engine::resume(config.space.clone(), config.engine.clone(), state)?,
        None => Engine::new(config.space.clone(), config.engine.clone())?,
    };
    let dir = RunDir { dir: out };
    dir.reset(engine.state())?;
    let c = dir.path(CHECKPOINT_FILE);
    checkpoint::save(&c, &checkpoint(&config, engine.state())).map_err(io_at(&c))?;
    let mut steps = 0;
    while !engine.is_finished() {
        if stop_after.is_some_and(|n| steps >= n) {
            return Ok(EXIT_PAUSED);
        }
        let report = engine.step(evaluator.as_ref())?;
        dir.record(&config, engine.state(), &report)?;
        steps += 1;
    }
    Ok(match dir.finish(&config, &engine)? {
        RunStatus::Satisfied => EXIT_SATISFIED,
        RunStatus::GenerationLimit => EXIT_LIMIT,
    })
}

pub fn cmd_evolve(args: &EvolveArgs) -> Result<u8, CliError> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.engine.seed = seed;
    }
    let out = args.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
    drive(config, None, out, args.stop_after)
}

pub fn cmd_resume(args: &ResumeArgs) -> Result<u8, CliError> {
    let (config, state) = checkpoint::load(&args.checkpoint)?;
    let out = match &args.out {
        Some(out) => out.clone(),
        None => args.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    if let Some(outcome) = &state.outcome {
        let dir = RunDir { dir: out };
        let engine = Engine::resume(config.space.clone(), config.engine.clone(), state.clone())?;
        dir.reset(&state)?;
        dir.finish(&config, &engine)?;
        return Ok(match outcome.status {
            RunStatus::Satisfied => EXIT_SATISFIED,
            RunStatus::GenerationLimit => EXIT_LIMIT,
        });
    }
    drive(config, Some(state), out, args.stop_after)
}

/// Reads a bare genotype or the `best` field of a result document.
fn read_genotype(path: &Path) -> Result<Genotype, CliError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let value = match value.get("best") {
        Some(best) => best.clone(),
        None => value,
    };
    serde_json::from_value(value).map_err(|e| CliError::Input(format!("{}: not a genotype: {e}", path.display())))
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<String, CliError> {
    let genotype = read_genotype(&args.genotype)?;
    let (space, default_shape) = match (&args.config, &args.space) {
        (Some(path), _) => {
            let config = load_config(path)?;
            (config.space, config.input_shape)
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("cnn");
            let kind = BuiltinSpace::from_name(name).ok_or_else(|| CliError::Input(format!("unknown space {name:?}")))?;
            (builtin_space(kind), Some(kind.default_input_shape()))
        }
    };
    let shape = args
        .input_shape
        .clone()
        .or(default_shape)
        .ok_or_else(|| CliError::Input("the config has no input_shape; pass --input-shape".into()))?;
    Ok(summarize(&genotype, &space, &shape)?.to_string())
}

pub fn cmd_report(args: &ReportArgs) -> Result<String, CliError> {
    let rows: Vec<HistoryRow> = history::read_history(&args.history)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.history.display())))?;
    if args.json {
        let mut text = serde_json::to_string_pretty(&history::summarize(&rows)).expect("summaries serialize");
        text.push('\n');
        Ok(text)
    } else {
        Ok(history::rows_csv(&rows))
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match &cli.command {
        Command::Evolve(a) => cmd_evolve(a),
        Command::Resume(a) => cmd_resume(a),
        Command::Inspect(a) => cmd_inspect(a).map(|s| {
            println!("{s}");
            EXIT_SATISFIED
        }),
        Command::Report(a) => cmd_report(a).map(|s| {
            print!("{s}");
            EXIT_SATISFIED
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        EXIT_FAULT
    })
}
