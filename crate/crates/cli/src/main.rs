use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use glance_cli::commands::{self, SweepKind};
use glance_cli::config::{ExperimentConfig, Objective};
use glance_core::data::{SynthTaskSpec, Transformation};
use glance_core::decode::{DecodeConfig, DecodeMode, Reranker};
use glance_core::glm::{RatioSchedule, SelectionStrategy};

/// Desk-scale lab for single-pass parallel sequence transduction.
#[derive(Parser)]
#[command(name = "glance", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model according to an experiment config.
    Train(TrainArgs),
    /// Generate a synthetic corpus and write it to `<out>.src/.tgt`.
    GenCorpus(GenCorpusArgs),
    /// Replace corpus targets with a teacher's greedy decodes.
    Distill(DistillArgs),
    /// Score a checkpoint on a corpus and print a report.
    Evaluate(EvaluateArgs),
    /// Decode a source file, one output sentence per input line.
    Decode(DecodeArgs),
    /// Elementwise-average parameter checkpoints.
    AverageCheckpoints(AverageArgs),
    /// Train and compare a family of configurations.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Resume from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Direct flag access to the most commonly swept config fields.
#[derive(Args)]
struct Overrides {
    /// Override run.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override optim.total_steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Override run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override optim.batch_size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override optim.lr.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the objective.
    #[arg(long, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Override glancing.strategy.
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<SelectionStrategy>,
    /// Override glancing.schedule with `constant:<l>`, `linear:<s>:<e>`,
    /// `fixed_count:<l>` or `decreasing_count:<s>:<e>`.
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<RatioSchedule>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(d) = &self.out_dir {
            cfg.run.out_dir = d.clone();
        }
        if let Some(s) = self.steps {
            cfg.optim.total_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(b) = self.batch_size {
            cfg.optim.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr = lr;
        }
        if let Some(o) = self.objective {
            cfg.objective = o;
        }
        if let Some(s) = self.strategy {
            cfg.glancing.strategy = s;
        }
        if let Some(s) = self.schedule {
            cfg.glancing.schedule = s;
        }
        // environment variable override applies last, by design only for
        // the output directory
        if let Ok(dir) = std::env::var("GLANCE_OUT_DIR") {
            cfg.run.out_dir = PathBuf::from(dir);
        }
    }
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    serde_plain(s)
}

fn parse_strategy(s: &str) -> Result<SelectionStrategy, String> {
    serde_plain(s)
}

fn serde_plain<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_schedule(s: &str) -> Result<RatioSchedule, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |v: &str| v.parse::<f64>().map_err(|e| e.to_string());
    match parts.as_slice() {
        ["constant", l] => Ok(RatioSchedule::Constant { lambda: num(l)? }),
        ["fixed_count", l] => Ok(RatioSchedule::FixedCount { lambda: num(l)? }),
        ["linear", a, b] => Ok(RatioSchedule::Linear { start: num(a)?, end: num(b)? }),
        ["decreasing_count", a, b] => {
            Ok(RatioSchedule::DecreasingCount { start: num(a)?, end: num(b)? })
        }
        _ => Err("expected constant:<l> | linear:<s>:<e> | fixed_count:<l> | decreasing_count:<s>:<e>".into()),
    }
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    vocab: usize,
    #[arg(long)]
    min_len: usize,
    #[arg(long)]
    max_len: usize,
    #[arg(long, value_parser = parse_transformation)]
    transformation: Transformation,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    pairs: usize,
    /// Output path prefix (writes `<out>.src` and `<out>.tgt`).
    #[arg(long)]
    out: PathBuf,
}

fn parse_transformation(s: &str) -> Result<Transformation, String> {
    serde_plain(s)
}

#[derive(Args)]
struct DistillArgs {
    /// Autoregressive teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Corpus path prefix to distill.
    #[arg(long)]
    corpus: PathBuf,
    /// Output corpus path prefix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeCommon {
    #[arg(long, value_parser = parse_mode, default_value = "parallel_greedy")]
    mode: DecodeMode,
    /// Length candidates for reranked decoding.
    #[arg(long, default_value_t = 7)]
    m: usize,
    #[arg(long, value_parser = parse_reranker, default_value = "self")]
    reranker: Reranker,
    /// Teacher checkpoint (required for the at_teacher reranker).
    #[arg(long)]
    teacher: Option<PathBuf>,
}

impl DecodeCommon {
    fn config(&self) -> DecodeConfig {
        DecodeConfig { mode: self.mode, m: self.m, reranker: self.reranker }
    }
}

fn parse_mode(s: &str) -> Result<DecodeMode, String> {
    serde_plain(s)
}

fn parse_reranker(s: &str) -> Result<Reranker, String> {
    serde_plain(s)
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus path prefix (`<prefix>.src/.tgt`).
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    decode: DecodeCommon,
    #[arg(long, default_value_t = 4)]
    bucket_width: usize,
    /// Also write the report as a JSON line.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentence file (with a `vocab <V>` header line).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    decode: DecodeCommon,
    /// Write outputs here instead of standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-sentence decode records (chosen length, score, pass count).
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct AverageArgs {
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Input checkpoints.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    sweep: SweepKind,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => {
            let mut cfg = ExperimentConfig::from_path(&args.config)?;
            args.overrides.apply(&mut cfg);
            cfg.validate()?;
            let outcome = commands::cmd_train(&cfg, args.resume.as_deref())?;
            println!("final checkpoint: {}", outcome.final_checkpoint.display());
            if let Some((score, step, path)) = outcome.best.first() {
                println!("best validation BLEU {score:.2} at step {step}: {}", path.display());
            }
        }
        Command::GenCorpus(args) => {
            let spec = SynthTaskSpec {
                vocab_size: args.vocab,
                min_len: args.min_len,
                max_len: args.max_len,
                transformation: args.transformation,
                seed: args.seed,
            };
            commands::cmd_gen_corpus(&spec, args.pairs, &args.out)?;
        }
        Command::Distill(args) => {
            commands::cmd_distill(&args.teacher, &args.corpus, &args.out)?;
        }
        Command::Evaluate(args) => {
            commands::cmd_evaluate(
                &args.checkpoint,
                &args.corpus,
                &args.decode.config(),
                args.decode.teacher.as_deref(),
                args.bucket_width,
                args.report.as_deref(),
            )?;
        }
        Command::Decode(args) => {
            commands::cmd_decode(
                &args.checkpoint,
                &args.input,
                &args.decode.config(),
                args.decode.teacher.as_deref(),
                args.output.as_deref(),
                args.sidecar.as_deref(),
            )?;
        }
        Command::AverageCheckpoints(args) => {
            commands::cmd_average_checkpoints(&args.inputs, &args.out)?;
        }
        Command::Ablate(args) => {
            let mut cfg = ExperimentConfig::from_path(&args.config)?;
            args.overrides.apply(&mut cfg);
            cfg.validate()?;
            let rows = commands::cmd_ablate(&cfg, args.sweep)?;
            let title = match args.sweep {
                SweepKind::FixedRatio => "fixed sampling ratio sweep",
                SweepKind::DecreasingRatio => "decreasing sampling ratio sweep",
                SweepKind::Strategies => "reference selection strategy sweep",
                SweepKind::Inputs => "sampling and decoder-input sweep",
            };
            print!("{}", glance_cli::report::render_ablation(title, &rows));
        }
    }
    Ok(())
}
