//! Command-line pipeline for long-tail ICD code augmentation.

pub mod config;
pub mod desk;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lta_core::evalkit::MacroMode;

use config::{BackendKind, PipelineConfig};
use pipeline::{Pipeline, StageError, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lta", version, about = "Long-tail ICD code augmentation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "lta.toml")]
    pub config: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Compute and print totals without writing artifacts.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Default)]
pub struct PlanArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub max_per_code: Option<u32>,
}

#[derive(Debug, Args, Default)]
pub struct GenerateArgs {
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: Option<PathBuf>,
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Average macro metrics over labels present in gold only.
    #[arg(long)]
    pub gold_present: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-tier code and sample counts.
    Stats,
    /// Allocation plan for tail and ultra-tail codes.
    Plan(PlanArgs),
    /// Anchored code sets for every planned synthetic note.
    Codesets,
    /// Knowledge-injected prompts for each code set.
    Prompts,
    /// Synthetic notes from the prompts.
    Generate(GenerateArgs),
    /// Real plus synthetic notes as one corpus.
    Merge,
    /// Before/after sample-count histogram CSV.
    Distribution,
    /// Metrics for classifier scores against gold labels.
    Evaluate(EvaluateArgs),
    /// Every stage in order.
    RunAll {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        generate: GenerateArgs,
    },
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "mock" => Ok(BackendKind::Mock),
        "http" => Ok(BackendKind::Http),
        other => Err(format!("unknown backend {other:?} (expected mock or http)")),
    }
}

fn apply_plan(cfg: &mut PipelineConfig, a: &PlanArgs) {
    if let Some(alpha) = a.alpha {
        cfg.allocation.alpha = alpha;
    }
    if let Some(m) = a.max_per_code {
        cfg.allocation.max_per_code = m;
    }
}

fn apply_generate(cfg: &mut PipelineConfig, a: &GenerateArgs) {
    if let Some(b) = a.backend {
        cfg.generation.backend = b;
    }
    if let Some(n) = a.max_in_flight {
        cfg.generation.params.max_in_flight = n;
    }
}

fn apply_evaluate(cfg: &mut PipelineConfig, a: &EvaluateArgs) {
    if let Some(g) = &a.gold {
        cfg.evaluation.gold = Some(g.clone());
    }
    if let Some(s) = &a.scores {
        cfg.evaluation.scores = Some(s.clone());
    }
    if a.gold_present {
        cfg.evaluation.macro_mode = MacroMode::GoldPresent;
    }
}

fn execute(cli: &Cli) -> Result<Status, StageError> {
    let mut cfg = PipelineConfig::load(&cli.global.config).map_err(StageError::Input)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = Some(seed);
    }
    if let Some(dir) = &cli.global.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    match &cli.command {
        Command::Plan(a) => apply_plan(&mut cfg, a),
        Command::Generate(a) => apply_generate(&mut cfg, a),
        Command::Evaluate(a) => apply_evaluate(&mut cfg, a),
        Command::RunAll { plan, generate } => {
            apply_plan(&mut cfg, plan);
            apply_generate(&mut cfg, generate);
        }
        _ => {}
    }
    let p = Pipeline::load(cfg, cli.global.dry_run)?;
    match &cli.command {
        Command::Stats => p.stats().map(|_| Status::Complete),
        Command::Plan(_) => p.plan().map(|_| Status::Complete),
        Command::Codesets => p.codesets(None).map(|_| Status::Complete),
        Command::Prompts => p.prompts(None).map(|_| Status::Complete),
        Command::Generate(_) => p.generate(None, None).map(|out| {
            if out.failures.is_empty() {
                Status::Complete
            } else {
                Status::PartialFailure
            }
        }),
        Command::Merge => p.merge(None).map(|_| Status::Complete),
        Command::Distribution => p.distribution(None).map(|_| Status::Complete),
        Command::Evaluate(_) => p.evaluate().map(|_| Status::Complete),
        Command::RunAll { .. } => p.run_all(),
    }
}

/// Run a parsed command line and map the outcome to a process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(Status::Complete) => EXIT_OK,
        Ok(Status::PartialFailure) => {
            eprintln!("some generation requests failed; see {}", pipeline::FAILURES_FILE);
            EXIT_PARTIAL
        }
        Err(e @ StageError::Input(_)) => {
            eprintln!("error: {e}");
            EXIT_INPUT
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
