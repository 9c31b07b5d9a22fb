//! The training loop: batch assembly, objective dispatch, schedules,
//! validation, checkpoint lifecycle and the metrics stream.
//!
//! Every random choice in a step is drawn from generators seeded by
//! `(run seed, step index)`, so a run resumed from a checkpoint follows the
//! exact trajectory of the uninterrupted run.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use glance_core::checkpoint::Checkpoint;
use glance_core::ctc;
use glance_core::data::{bleu, derive_seed, generate_corpus, generate_corpus_stream, load_corpus, Corpus};
use glance_core::decode::{DecodeConfig, DecodeMode, Decoder};
use glance_core::glm::{self, ratio_schedule_value, GlancingConfig, SentenceParts};
use glance_core::model::{Forward, ModelParams};
use glance_core::tensor::{Adam, NodeId, Tape};

use crate::config::{ExperimentConfig, Objective};
use crate::schedule::learning_rate;

/// One line of the training-metrics stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_distance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_sample_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub bleu: f64,
    pub checkpoint: String,
}

/// Digest comparison around the measurement phase of every training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct TwoPassCheck {
    pub checked_steps: u64,
    pub clean_steps: u64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Best validation checkpoints, highest BLEU first.
    pub best: Vec<(f64, u64, PathBuf)>,
    pub final_checkpoint: PathBuf,
    pub two_pass: Option<TwoPassCheck>,
}

/// Combined digest of parameters and optimizer state.
pub fn state_digest(params: &ModelParams, opt: &Adam) -> u64 {
    let mut h = params.digest();
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    let (t, slots) = opt.export_state();
    eat(&t.to_le_bytes());
    for (name, m, v) in slots {
        eat(name.as_bytes());
        for x in m.iter().chain(v.iter()) {
            eat(&x.to_le_bytes());
        }
    }
    h
}

pub fn training_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.task.corpus {
        Some(prefix) => {
            let corpus = load_corpus(prefix)
                .with_context(|| format!("loading corpus {}", prefix.display()))?;
            if corpus.vocab_size != cfg.task.vocab_size {
                bail!(
                    "corpus vocab {} does not match task vocab {}",
                    corpus.vocab_size,
                    cfg.task.vocab_size
                );
            }
            Ok(corpus)
        }
        None => Ok(generate_corpus(&cfg.task.spec(), cfg.task.train_pairs)),
    }
}

pub fn validation_corpus(cfg: &ExperimentConfig) -> Corpus {
    generate_corpus_stream(&cfg.task.spec(), cfg.task.valid_pairs, 1)
}

pub fn test_corpus(cfg: &ExperimentConfig) -> Corpus {
    generate_corpus_stream(&cfg.task.spec(), cfg.task.test_pairs, 2)
}

/// Decode mode that matches how an objective's model is meant to be used.
pub fn natural_decode_mode(objective: Objective) -> DecodeMode {
    match objective {
        Objective::At => DecodeMode::AtGreedy,
        Objective::Ctc | Objective::GlatCtc => DecodeMode::Ctc,
        _ => DecodeMode::ParallelGreedy,
    }
}

pub fn validation_bleu(params: &ModelParams, corpus: &Corpus, mode: DecodeMode) -> f64 {
    let mut dec = Decoder::new(params, None);
    let cfg = DecodeConfig { mode, ..Default::default() };
    let hyps: Vec<Vec<usize>> =
        corpus.pairs.iter().map(|p| dec.decode(&p.source, &cfg).tokens).collect();
    bleu(&hyps, &corpus.targets())
}

struct BatchStats {
    loss: f64,
    distance_sum: usize,
    sample_fraction_sum: f64,
    glanced_sentences: usize,
    length_hits: usize,
    length_total: usize,
}

/// Run one experiment to completion (or from a resume checkpoint).
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let glancing = cfg.effective_glancing();
    let out_dir = cfg.run.out_dir.clone();
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;

    let corpus = training_corpus(cfg)?;
    let valid = validation_corpus(cfg);

    let mut opt = Adam::new(cfg.optim.lr);
    opt.beta1 = cfg.optim.beta1;
    opt.beta2 = cfg.optim.beta2;
    opt.eps = cfg.optim.eps;

    let (mut params, start_step) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != model_cfg {
                bail!("resume checkpoint model config does not match the experiment config");
            }
            let params = ckpt.restore_params()?;
            ckpt.restore_optimizer(&mut opt)?;
            (params, ckpt.step)
        }
        None => (ModelParams::init(&model_cfg, cfg.run.seed), 0),
    };
    if start_step >= cfg.optim.total_steps {
        bail!("resume step {} is past total_steps {}", start_step, cfg.optim.total_steps);
    }

    let mut metrics_file = fs::File::create(out_dir.join("metrics.jsonl"))?;
    let mut val_file = fs::File::create(out_dir.join("validations.jsonl"))?;

    let mut metrics = Vec::new();
    let mut validations = Vec::new();
    let mut best: Vec<(f64, u64, PathBuf)> = Vec::new();
    let mut two_pass = cfg.run.verify_two_pass.then(TwoPassCheck::default);

    for step in start_step..cfg.optim.total_steps {
        opt.lr = learning_rate(&cfg.optim, step);
        let lambda = cfg
            .objective
            .uses_glancing()
            .then(|| ratio_schedule_value(&glancing.schedule, step, cfg.optim.total_steps));

        let stats = train_step(
            cfg,
            &model_cfg,
            &glancing,
            &corpus,
            &mut params,
            &mut opt,
            step,
            lambda.unwrap_or(0.0),
            two_pass.as_mut(),
        )?;

        if (step + 1) % cfg.run.log_every == 0 || step + 1 == cfg.optim.total_steps {
            let record = StepRecord {
                step: step + 1,
                lr: opt.lr,
                loss: stats.loss,
                lambda,
                mean_distance: (stats.glanced_sentences > 0)
                    .then(|| stats.distance_sum as f64 / stats.glanced_sentences as f64),
                mean_sample_fraction: (stats.glanced_sentences > 0)
                    .then(|| stats.sample_fraction_sum / stats.glanced_sentences as f64),
                length_accuracy: (stats.length_total > 0)
                    .then(|| stats.length_hits as f64 / stats.length_total as f64),
            };
            writeln!(metrics_file, "{}", serde_json::to_string(&record)?)?;
            metrics.push(record);
        }

        if (step + 1) % cfg.run.validate_every == 0 || step + 1 == cfg.optim.total_steps {
            let score = validation_bleu(&params, &valid, natural_decode_mode(cfg.objective));
            let path = out_dir.join(format!("step_{:06}.ckpt", step + 1));
            Checkpoint::capture(&params, step + 1, Some(&opt)).save(&path)?;
            best.push((score, step + 1, path.clone()));
            best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            while best.len() > cfg.run.keep_best {
                let (_, _, dropped) = best.pop().expect("nonempty");
                let _ = fs::remove_file(dropped);
            }
            let record = ValidationRecord {
                step: step + 1,
                bleu: score,
                checkpoint: path.display().to_string(),
            };
            writeln!(val_file, "{}", serde_json::to_string(&record)?)?;
            validations.push(record);
            log::info!("step {}: validation bleu {score:.2}", step + 1);
        }
    }

    let best_list: String = best
        .iter()
        .map(|(b, s, p)| format!("{b:.4}\t{s}\t{}\n", p.display()))
        .collect();
    fs::write(out_dir.join("best_checkpoints.txt"), best_list)?;

    let final_checkpoint = out_dir.join("final.ckpt");
    Checkpoint::capture(&params, cfg.optim.total_steps, Some(&opt)).save(&final_checkpoint)?;

    Ok(TrainOutcome { params, metrics, validations, best, final_checkpoint, two_pass })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cfg: &ExperimentConfig,
    model_cfg: &glance_core::model::ModelConfig,
    glancing: &GlancingConfig,
    corpus: &Corpus,
    params: &mut ModelParams,
    opt: &mut Adam,
    step: u64,
    lambda_now: f64,
    mut two_pass: Option<&mut TwoPassCheck>,
) -> Result<BatchStats> {
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, step * 3));
    let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, step * 3 + 1));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, step * 3 + 2));
    let batch: Vec<usize> =
        (0..cfg.optim.batch_size).map(|_| batch_rng.gen_range(0..corpus.pairs.len())).collect();

    let digest_before = two_pass.as_ref().map(|_| state_digest(params, opt));

    let mut tape = Tape::new();
    let nodes = params.enter(&mut tape);
    let mut fwd = Forward::train(&mut tape, &nodes, model_cfg, &mut model_rng);

    // collected loss pieces: (weighted token-sum node, token count)
    let mut token_parts: Vec<(NodeId, usize)> = Vec::new();
    let mut length_parts: Vec<NodeId> = Vec::new();
    let mut stats = BatchStats {
        loss: 0.0,
        distance_sum: 0,
        sample_fraction_sum: 0.0,
        glanced_sentences: 0,
        length_hits: 0,
        length_total: 0,
    };

    fn push_sentence(
        parts: SentenceParts,
        token_parts: &mut Vec<(NodeId, usize)>,
        length_parts: &mut Vec<NodeId>,
        stats: &mut BatchStats,
        target_len: usize,
    ) {
        token_parts.push((parts.token_sum, parts.token_count));
        length_parts.push(parts.length_nll);
        stats.length_total += 1;
        if parts.length_top1 == target_len {
            stats.length_hits += 1;
        }
        if let Some(o) = parts.outcome {
            stats.distance_sum += o.distance;
            stats.sample_fraction_sum += o.sampling_number as f64 / target_len.max(1) as f64;
            stats.glanced_sentences += 1;
        }
    }

    match cfg.objective {
        Objective::Glm | Objective::MlmAblation => {
            // measurement phase for the whole batch, then the learning phase
            let mut staged = Vec::with_capacity(batch.len());
            for &i in &batch {
                let pair = &corpus.pairs[i];
                let enc = fwd.encode(&pair.source);
                let fp = glm::first_pass(&mut fwd, &enc, pair.target.len());
                staged.push((i, enc, fp));
            }
            if let Some(check) = two_pass.as_deref_mut() {
                check.checked_steps += 1;
                if digest_before == Some(state_digest(params, opt)) {
                    check.clean_steps += 1;
                }
            }
            for (i, enc, fp) in staged {
                let pair = &corpus.pairs[i];
                let parts = glm::glm_parts_with_first_pass(
                    &mut fwd,
                    &enc,
                    &pair.target,
                    &fp,
                    glancing,
                    lambda_now,
                    &mut sample_rng,
                );
                push_sentence(parts, &mut token_parts, &mut length_parts, &mut stats, pair.target.len());
            }
        }
        Objective::Nat => {
            for &i in &batch {
                let pair = &corpus.pairs[i];
                let enc = fwd.encode(&pair.source);
                let parts = glm::nat_sentence_parts(&mut fwd, &enc, &pair.target);
                push_sentence(parts, &mut token_parts, &mut length_parts, &mut stats, pair.target.len());
            }
        }
        Objective::At => {
            for &i in &batch {
                let pair = &corpus.pairs[i];
                let enc = fwd.encode(&pair.source);
                let parts = glm::at_sentence_parts(&mut fwd, &enc, &pair.target);
                push_sentence(parts, &mut token_parts, &mut length_parts, &mut stats, pair.target.len());
            }
        }
        Objective::Ctc => {
            for &i in &batch {
                let pair = &corpus.pairs[i];
                let enc = fwd.encode(&pair.source);
                match ctc::ctc_sentence_parts(&mut fwd, &enc, &pair.target) {
                    Ok(p) => token_parts.push((p.token_nll, p.token_count)),
                    Err(e) => log::warn!("skipping sentence: {e}"),
                }
            }
        }
        Objective::GlatCtc => {
            let mut staged = Vec::with_capacity(batch.len());
            for &i in &batch {
                let pair = &corpus.pairs[i];
                let enc = fwd.encode(&pair.source);
                match ctc::ctc_first_pass(&mut fwd, &enc, &pair.target) {
                    Ok(fp) => staged.push((i, enc, fp)),
                    Err(e) => log::warn!("skipping sentence: {e}"),
                }
            }
            if let Some(check) = two_pass.as_deref_mut() {
                check.checked_steps += 1;
                if digest_before == Some(state_digest(params, opt)) {
                    check.clean_steps += 1;
                }
            }
            for (i, enc, fp) in staged {
                let pair = &corpus.pairs[i];
                let parts = ctc::glat_ctc_parts_with_first_pass(
                    &mut fwd,
                    &enc,
                    &pair.target,
                    &fp,
                    glancing,
                    lambda_now,
                    &mut sample_rng,
                )?;
                token_parts.push((parts.token_nll, parts.token_count));
                stats.distance_sum += parts.outcome.distance;
                stats.sample_fraction_sum +=
                    parts.outcome.sampling_number as f64 / pair.target.len().max(1) as f64;
                stats.glanced_sentences += 1;
            }
        }
    }

    if token_parts.is_empty() {
        log::warn!("step {step}: every sentence in the batch was infeasible; skipping update");
        return Ok(stats);
    }

    // token-level mean over the whole batch
    let total_tokens: usize = token_parts.iter().map(|(_, c)| c).sum();
    let mut token_sum = token_parts[0].0;
    for &(node, _) in &token_parts[1..] {
        token_sum = tape.add(token_sum, node);
    }
    let mut loss = tape.scale(token_sum, 1.0 / total_tokens.max(1) as f64);
    if !length_parts.is_empty() && glancing.length_loss_weight > 0.0 {
        let mut len_sum = length_parts[0];
        for &node in &length_parts[1..] {
            len_sum = tape.add(len_sum, node);
        }
        let len_term =
            tape.scale(len_sum, glancing.length_loss_weight / length_parts.len() as f64);
        loss = tape.add(loss, len_term);
    }
    stats.loss = tape.data(loss)[0];

    tape.backward(loss);
    params.pull_grads(&tape, &nodes);
    params.adam_step(opt);
    Ok(stats)
}
