//! Implementations behind the CLI subcommands; also the programmatic API
//! the integration tests drive.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use glance_core::checkpoint::Checkpoint;
use glance_core::data::{
    distill_corpus, generate_corpus, load_corpus, load_sentence_file, save_corpus,
    save_sentence_file, Corpus, SynthTaskSpec,
};
use glance_core::decode::{DecodeConfig, Decoder};
use glance_core::glm::{RatioSchedule, SelectionStrategy};
use glance_core::model::ModelParams;

use crate::config::{ExperimentConfig, Objective};
use crate::report::{self, AblateRow, EvalReport};
use crate::trainer::{self, run_experiment, TrainOutcome};

pub fn cmd_train(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    let outcome = run_experiment(cfg, resume)?;
    if let Some((score, step, path)) = outcome.best.first() {
        log::info!("best validation bleu {score:.2} at step {step} ({})", path.display());
    }
    Ok(outcome)
}

pub fn cmd_gen_corpus(spec: &SynthTaskSpec, pairs: usize, out_prefix: &Path) -> Result<()> {
    let corpus = generate_corpus(spec, pairs);
    save_corpus(&corpus, out_prefix)?;
    println!(
        "wrote {} pairs to {}.src / {}.tgt",
        corpus.len(),
        out_prefix.display(),
        out_prefix.display()
    );
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.restore_params()?)
}

pub fn cmd_distill(teacher_path: &Path, corpus_prefix: &Path, out_prefix: &Path) -> Result<()> {
    let teacher = load_model(teacher_path)?;
    let corpus = load_corpus(corpus_prefix)?;
    if corpus.vocab_size != teacher.cfg.vocab_size {
        bail!(
            "corpus vocab {} does not match teacher vocab {}",
            corpus.vocab_size,
            teacher.cfg.vocab_size
        );
    }
    let distilled = distill_corpus(&corpus, &teacher);
    save_corpus(&distilled, out_prefix)?;
    println!("distilled {} pairs into {}.src/.tgt", distilled.len(), out_prefix.display());
    Ok(())
}

pub fn cmd_evaluate(
    checkpoint: &Path,
    corpus_prefix: &Path,
    dcfg: &DecodeConfig,
    teacher_path: Option<&Path>,
    bucket_width: usize,
    report_path: Option<&Path>,
) -> Result<EvalReport> {
    dcfg.validate()?;
    let params = load_model(checkpoint)?;
    let corpus = load_corpus(corpus_prefix)?;
    if corpus.vocab_size != params.cfg.vocab_size {
        bail!(
            "corpus vocab {} does not match model vocab {}",
            corpus.vocab_size,
            params.cfg.vocab_size
        );
    }
    let teacher = teacher_path.map(load_model).transpose()?;
    let report = report::evaluate(&params, teacher.as_ref(), &corpus, dcfg, bucket_width);
    print!("{}", report::render_eval(&report));
    if let Some(path) = report_path {
        report::write_jsonl(path, std::slice::from_ref(&report))?;
    }
    Ok(report)
}

/// Per-sentence decode side-channel record.
#[derive(serde::Serialize)]
pub struct DecodeRecord {
    pub chosen_length: usize,
    pub decoder_pass_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn cmd_decode(
    checkpoint: &Path,
    input: &Path,
    dcfg: &DecodeConfig,
    teacher_path: Option<&Path>,
    output: Option<&Path>,
    sidecar: Option<&Path>,
) -> Result<()> {
    dcfg.validate()?;
    let params = load_model(checkpoint)?;
    let (vocab_size, sources) = load_sentence_file(input)?;
    if vocab_size != params.cfg.vocab_size {
        bail!("input vocab {} does not match model vocab {}", vocab_size, params.cfg.vocab_size);
    }
    let teacher = teacher_path.map(load_model).transpose()?;
    let mut dec = Decoder::new(&params, teacher.as_ref());
    let mut outputs = Vec::with_capacity(sources.len());
    let mut records = Vec::with_capacity(sources.len());
    for src in &sources {
        let r = dec.decode(src, dcfg);
        records.push(DecodeRecord {
            chosen_length: r.chosen_length,
            decoder_pass_count: r.decoder_pass_count,
            score: r.candidates.as_ref().and_then(|cs| {
                cs.iter().map(|c| c.score).max_by(f64::total_cmp)
            }),
        });
        outputs.push(r.tokens);
    }
    match output {
        Some(path) => save_sentence_file(path, vocab_size, &outputs)?,
        None => {
            for s in &outputs {
                let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
                println!("{}", line.join(" "));
            }
        }
    }
    if let Some(path) = sidecar {
        report::write_jsonl(path, &records)?;
    }
    Ok(())
}

pub fn cmd_average_checkpoints(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        bail!("need at least one checkpoint to average");
    }
    let loaded: Vec<Checkpoint> =
        inputs.iter().map(|p| Checkpoint::load(p)).collect::<Result<_, _>>()?;
    let avg = Checkpoint::average(&loaded)?;
    avg.save(out)?;
    println!("averaged {} checkpoints into {}", loaded.len(), out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    /// Non-adaptive sampling counts at fixed ratios, plus the adaptive row.
    FixedRatio,
    /// Linearly decreasing sampling counts, plus the adaptive row.
    DecreasingRatio,
    /// The five reference-word selection strategies (with and without NPD).
    Strategies,
    /// Decoder-input conventions: uniform sampling number and mask inputs.
    Inputs,
}

/// Run one training + evaluation per sweep row, all under shared seeds.
pub fn cmd_ablate(base: &ExperimentConfig, sweep: SweepKind) -> Result<Vec<AblateRow>> {
    let rows: Vec<(String, ExperimentConfig, bool)> = match sweep {
        SweepKind::FixedRatio => {
            let mut rows = Vec::new();
            for lambda in [0.0, 0.1, 0.2, 0.3, 0.4] {
                let mut cfg = base.clone();
                cfg.objective = Objective::Glm;
                cfg.glancing.schedule = RatioSchedule::FixedCount { lambda };
                rows.push((format!("fixed {lambda:.1}"), cfg, false));
            }
            let mut adaptive = base.clone();
            adaptive.objective = Objective::Glm;
            adaptive.glancing.schedule = RatioSchedule::Constant { lambda: 0.5 };
            rows.push(("adaptive".into(), adaptive, false));
            rows
        }
        SweepKind::DecreasingRatio => {
            let mut rows = Vec::new();
            for end in [0.0, 0.1, 0.2, 0.3] {
                let mut cfg = base.clone();
                cfg.objective = Objective::Glm;
                cfg.glancing.schedule = RatioSchedule::DecreasingCount { start: 0.5, end };
                rows.push((format!("decreasing 0.5->{end:.1}"), cfg, false));
            }
            let mut adaptive = base.clone();
            adaptive.objective = Objective::Glm;
            adaptive.glancing.schedule = RatioSchedule::Constant { lambda: 0.5 };
            rows.push(("adaptive".into(), adaptive, false));
            rows
        }
        SweepKind::Strategies => [
            ("random", SelectionStrategy::Random),
            ("p_ref", SelectionStrategy::PRef),
            ("1-p_ref", SelectionStrategy::OneMinusPRef),
            ("most certain", SelectionStrategy::MostCertain),
            ("most uncertain", SelectionStrategy::MostUncertain),
        ]
        .into_iter()
        .map(|(label, strategy)| {
            let mut cfg = base.clone();
            cfg.objective = Objective::Glm;
            cfg.glancing.strategy = strategy;
            (label.to_string(), cfg, true)
        })
        .collect(),
        SweepKind::Inputs => {
            let mut uniform = base.clone();
            uniform.objective = Objective::Glm;
            uniform.glancing.strategy = SelectionStrategy::UniformMlm;
            let mut mask = base.clone();
            mask.objective = Objective::Glm;
            mask.glancing.input_mode = glance_core::glm::InputMode::MaskToken;
            let mut full = base.clone();
            full.objective = Objective::Glm;
            vec![
                ("uniform sampling".into(), uniform, false),
                ("mask inputs".into(), mask, false),
                ("glancing".into(), full, false),
            ]
        }
    };

    let test = trainer::test_corpus(base);
    let mut out_rows = Vec::with_capacity(rows.len());
    for (label, mut cfg, with_npd) in rows {
        let slug: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        cfg.run.out_dir = base.run.out_dir.join(format!("sweep_{slug}"));
        log::info!("ablation row `{label}`");
        let outcome = run_experiment(&cfg, None)?;
        let row = evaluate_row(&label, &cfg, &outcome.params, &test, with_npd);
        out_rows.push(row);
    }
    report::write_jsonl(&base.run.out_dir.join("ablation.jsonl"), &out_rows)?;
    Ok(out_rows)
}

fn evaluate_row(
    label: &str,
    cfg: &ExperimentConfig,
    params: &ModelParams,
    test: &Corpus,
    with_npd: bool,
) -> AblateRow {
    let mode = trainer::natural_decode_mode(cfg.objective);
    let greedy = report::evaluate(params, None, test, &DecodeConfig { mode, ..Default::default() }, 4);
    let bleu_npd = with_npd.then(|| {
        let dcfg = DecodeConfig {
            mode: glance_core::decode::DecodeMode::Npd,
            m: 7,
            reranker: glance_core::decode::Reranker::SelfScore,
        };
        report::evaluate(params, None, test, &dcfg, 4).bleu
    });
    AblateRow { label: label.to_string(), bleu: greedy.bleu, bleu_npd }
}
