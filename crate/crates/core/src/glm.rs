//! Glancing-sample training: a gradient-free measurement decode picks how
//! many reference tokens to reveal, a second decode learns to predict the
//! rest. Also hosts the NAT and masked-LM baseline objectives, the distance
//! metrics, selection strategies and sampling-ratio schedules.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc;
use crate::error::CoreError;
use crate::model::{EncoderOutput, Forward};
use crate::tensor::{softmax_rows_raw, NodeId};
use crate::vocab;

pub const DEFAULT_LENGTH_LOSS_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    /// Uniform without replacement; the default and empirically the strongest.
    Random,
    /// Sample proportionally to the first-pass probability of the reference token.
    PRef,
    /// Sample proportionally to one minus that probability.
    OneMinusPRef,
    /// Top positions by first-pass confidence.
    MostCertain,
    /// Bottom positions by first-pass confidence.
    MostUncertain,
    /// Masked-LM recipe: the sampling number itself is uniform on `[1, T]`,
    /// positions are uniform. Pair with [`InputMode::MaskToken`].
    UniformMlm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Hamming,
    Levenshtein,
    Lcs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Replace sampled rows of the copied encoder output with target embeddings.
    EncoderCopy,
    /// Mask-Predict convention: sampled rows are target embeddings, all other
    /// rows are the MASK embedding (the copied input is discarded).
    MaskToken,
}

/// How the sampling number is derived and how the ratio evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RatioSchedule {
    /// Adaptive: `S = floor(lambda * distance)`.
    Constant { lambda: f64 },
    /// Adaptive with linearly annealed lambda.
    Linear { start: f64, end: f64 },
    /// Non-adaptive ablation: `S = floor(lambda * T)` regardless of distance.
    FixedCount { lambda: f64 },
    /// Non-adaptive with linearly annealed lambda.
    DecreasingCount { start: f64, end: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Sampling number scales with the first-pass distance.
    Adaptive,
    /// Sampling number scales with the target length.
    CountBased,
}

impl RatioSchedule {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            RatioSchedule::Constant { .. } | RatioSchedule::Linear { .. } => ScheduleKind::Adaptive,
            RatioSchedule::FixedCount { .. } | RatioSchedule::DecreasingCount { .. } => {
                ScheduleKind::CountBased
            }
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        let valid = match self {
            RatioSchedule::Constant { lambda } | RatioSchedule::FixedCount { lambda } => ok(*lambda),
            RatioSchedule::Linear { start, end } | RatioSchedule::DecreasingCount { start, end } => {
                ok(*start) && ok(*end)
            }
        };
        if valid {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig("sampling ratios must lie in [0, 1]".into()))
        }
    }
}

/// Current ratio value for a training step.
pub fn ratio_schedule_value(schedule: &RatioSchedule, step: u64, total_steps: u64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    let frac = if total_steps == 0 { 0.0 } else { step as f64 / total_steps as f64 };
    match schedule {
        RatioSchedule::Constant { lambda } | RatioSchedule::FixedCount { lambda } => *lambda,
        RatioSchedule::Linear { start, end } | RatioSchedule::DecreasingCount { start, end } => {
            start + (end - start) * frac
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlancingConfig {
    pub strategy: SelectionStrategy,
    pub metric: DistanceMetric,
    pub schedule: RatioSchedule,
    pub input_mode: InputMode,
    pub length_loss_weight: f64,
}

impl Default for GlancingConfig {
    fn default() -> Self {
        GlancingConfig {
            strategy: SelectionStrategy::Random,
            metric: DistanceMetric::Hamming,
            schedule: RatioSchedule::Constant { lambda: 0.5 },
            input_mode: InputMode::EncoderCopy,
            length_loss_weight: DEFAULT_LENGTH_LOSS_WEIGHT,
        }
    }
}

impl GlancingConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.schedule.validate()?;
        if self.length_loss_weight < 0.0 {
            return Err(CoreError::InvalidConfig("length_loss_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// What one glancing step measured and selected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlanceOutcome {
    /// Strictly increasing revealed positions; indexes the target (or, in
    /// CTC mode, the alignment frame).
    pub sampled_positions: Vec<usize>,
    /// The measurement decode's prediction.
    pub first_pass: Vec<usize>,
    pub distance: usize,
    pub sampling_number: usize,
}

// ---------------------------------------------------------------------------
// Distances
// ---------------------------------------------------------------------------

/// Positionwise mismatch count; sequences must have equal length (use
/// Levenshtein or LCS otherwise).
pub fn hamming_distance(a: &[usize], b: &[usize]) -> usize {
    assert_eq!(a.len(), b.len(), "contract error: hamming distance requires equal lengths");
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Unit-cost edit distance via the classic two-row dynamic program.
pub fn levenshtein_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn distance(metric: DistanceMetric, y: &[usize], y_hat: &[usize]) -> usize {
    match metric {
        DistanceMetric::Hamming => hamming_distance(y, y_hat),
        DistanceMetric::Levenshtein => levenshtein_distance(y, y_hat),
        DistanceMetric::Lcs => ctc::lcs_distance(y, y_hat),
    }
}

/// `S = floor(lambda * count)` clamped to `[0, cap]`. The tiny epsilon keeps
/// exact rational products (e.g. 0.3 * 10) from flooring one short.
pub fn sampling_number(lambda: f64, count: usize, cap: usize) -> usize {
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    let s = (lambda * count as f64 + 1e-9).floor() as usize;
    s.min(cap)
}

/// Sampling number from a pair of sequences under a metric, capped at `|y|`.
pub fn sampling_number_for(
    y: &[usize],
    y_hat: &[usize],
    lambda: f64,
    metric: DistanceMetric,
) -> usize {
    sampling_number(lambda, distance(metric, y, y_hat), y.len())
}

// ---------------------------------------------------------------------------
// Position selection
// ---------------------------------------------------------------------------

/// First-pass prediction with its full softmax table, the evidence the
/// probability-aware selection strategies consume.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub y_hat: Vec<usize>,
    /// Row-major `[T x V]` softmax probabilities.
    pub probs: Vec<f64>,
    pub vocab: usize,
}

impl FirstPass {
    pub fn prob(&self, t: usize, token: usize) -> f64 {
        self.probs[t * self.vocab + token]
    }

    pub fn max_prob(&self, t: usize) -> f64 {
        self.probs[t * self.vocab..(t + 1) * self.vocab]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Select exactly `s` distinct positions of `y` according to the strategy.
/// The returned positions are strictly increasing.
pub fn glancing_sample(
    y: &[usize],
    s: usize,
    strategy: SelectionStrategy,
    first_pass: &FirstPass,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let t = y.len();
    assert!(s <= t, "contract error: sampling number {s} exceeds target length {t}");
    if s == 0 {
        return Vec::new();
    }
    let mut picked = match strategy {
        SelectionStrategy::Random | SelectionStrategy::UniformMlm => {
            index::sample(rng, t, s).into_vec()
        }
        SelectionStrategy::PRef => {
            let w: Vec<f64> = (0..t).map(|i| first_pass.prob(i, y[i])).collect();
            weighted_without_replacement(&w, s, rng)
        }
        SelectionStrategy::OneMinusPRef => {
            let w: Vec<f64> = (0..t).map(|i| 1.0 - first_pass.prob(i, y[i])).collect();
            weighted_without_replacement(&w, s, rng)
        }
        SelectionStrategy::MostCertain => top_by_confidence(first_pass, t, s, true),
        SelectionStrategy::MostUncertain => top_by_confidence(first_pass, t, s, false),
    };
    picked.sort_unstable();
    picked
}

fn top_by_confidence(fp: &FirstPass, t: usize, s: usize, certain: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t).collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (fp.max_prob(a), fp.max_prob(b));
        let ord = if certain {
            pb.partial_cmp(&pa).unwrap()
        } else {
            pa.partial_cmp(&pb).unwrap()
        };
        ord.then(a.cmp(&b))
    });
    idx.truncate(s);
    idx
}

/// Sequential weighted draws with renormalization; falls back to uniform when
/// the remaining mass vanishes.
fn weighted_without_replacement(weights: &[f64], s: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut out = Vec::with_capacity(s);
    for _ in 0..s {
        let total: f64 = remaining.iter().map(|&i| weights[i].max(0.0)).sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..remaining.len())
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = remaining.len() - 1;
            for (k, &i) in remaining.iter().enumerate() {
                r -= weights[i].max(0.0);
                if r <= 0.0 {
                    chosen = k;
                    break;
                }
            }
            chosen
        };
        out.push(remaining.swap_remove(pick));
    }
    out
}

// ---------------------------------------------------------------------------
// Input replacement
// ---------------------------------------------------------------------------

/// Rebuild the decoder input around the revealed positions.
///
/// `EncoderCopy` swaps the rows at `positions` for the embeddings of the
/// corresponding `targets` tokens and leaves every other row untouched.
/// `MaskToken` discards `h`: unrevealed rows become the MASK embedding.
pub fn replace_inputs(
    fwd: &mut Forward,
    h: NodeId,
    targets: &[usize],
    positions: &[usize],
    mode: InputMode,
) -> NodeId {
    debug_assert!(positions.windows(2).all(|w| w[0] < w[1]));
    match mode {
        InputMode::EncoderCopy => {
            if positions.is_empty() {
                return h;
            }
            let tokens: Vec<usize> = positions.iter().map(|&p| targets[p]).collect();
            let rows = fwd.embed_tokens(&tokens);
            fwd.tape.replace_rows(h, rows, positions)
        }
        InputMode::MaskToken => {
            let mut tokens = vec![vocab::MASK; targets.len()];
            for &p in positions {
                tokens[p] = targets[p];
            }
            fwd.embed_tokens(&tokens)
        }
    }
}

// ---------------------------------------------------------------------------
// Training-step assembly
// ---------------------------------------------------------------------------

/// Gradient-free measurement decode at the given target length. Dropout is
/// suspended so the pass consumes no random draws and measures the model
/// itself; the scratch nodes are trimmed from the tape afterwards.
pub fn first_pass(fwd: &mut Forward, enc: &EncoderOutput, t_len: usize) -> FirstPass {
    let mark = fwd.tape.mark();
    let was_dropout = fwd.dropout_enabled();
    fwd.tape.set_recording(false);
    fwd.set_dropout(false);
    let h = fwd.copy_decoder_inputs(enc, t_len);
    let logits = fwd.decode_parallel(h, enc);
    let vocab_size = fwd.cfg.vocab_size;
    let probs = softmax_rows_raw(fwd.tape.data(logits), t_len, vocab_size);
    let y_hat = fwd.tape.argmax_rows(logits);
    fwd.set_dropout(was_dropout);
    fwd.tape.set_recording(true);
    fwd.tape.truncate(mark);
    FirstPass { y_hat, probs, vocab: vocab_size }
}

/// Loss ingredients for one sentence, before batch-level reduction.
pub struct SentenceParts {
    /// Sum of per-position cross-entropies over the counted positions.
    pub token_sum: NodeId,
    /// Number of positions contributing to `token_sum`.
    pub token_count: usize,
    /// Cross-entropy of the true length under the length head.
    pub length_nll: NodeId,
    /// The length head's current argmax length (1-based), for accuracy logs.
    pub length_top1: usize,
    /// Second-pass logits (gradients flow through these only).
    pub logits: NodeId,
    pub outcome: Option<GlanceOutcome>,
}

/// Decide the sampling number for one sentence.
fn decide_sampling_number(
    cfg: &GlancingConfig,
    lambda_now: f64,
    dist: usize,
    t_len: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    if cfg.strategy == SelectionStrategy::UniformMlm {
        return rng.gen_range(1..=t_len);
    }
    match cfg.schedule.kind() {
        ScheduleKind::Adaptive => sampling_number(lambda_now, dist, t_len),
        ScheduleKind::CountBased => sampling_number(lambda_now, t_len, t_len),
    }
}

/// One glancing sentence: measurement pass, reveal, learning pass.
/// The loss sums cross-entropy over the non-revealed positions only.
pub fn glm_sentence_parts(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> SentenceParts {
    let fp = first_pass(fwd, enc, target.len());
    glm_parts_with_first_pass(fwd, enc, target, &fp, cfg, lambda_now, rng)
}

/// Learning pass given an already-computed measurement decode; lets a batch
/// driver run all measurement passes before any gradient-carrying work.
pub fn glm_parts_with_first_pass(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
    fp: &FirstPass,
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> SentenceParts {
    let t_len = target.len();
    let dist = distance(cfg.metric, target, &fp.y_hat);
    let s = decide_sampling_number(cfg, lambda_now, dist, t_len, rng);
    let positions = glancing_sample(target, s, cfg.strategy, fp, rng);

    let h = fwd.copy_decoder_inputs(enc, t_len);
    let h_glanced = replace_inputs(fwd, h, target, &positions, cfg.input_mode);
    let logits = fwd.decode_parallel(h_glanced, enc);

    let mut weights = vec![1.0; t_len];
    for &p in &positions {
        weights[p] = 0.0;
    }
    let token_sum = fwd.tape.cross_entropy_rows(logits, target, &weights);
    let len_terms = fwd.length_terms(enc, t_len);
    SentenceParts {
        token_sum,
        token_count: t_len - s,
        length_nll: len_terms.nll,
        length_top1: len_terms.top1,
        logits,
        outcome: Some(GlanceOutcome {
            sampled_positions: positions,
            first_pass: fp.y_hat.clone(),
            distance: dist,
            sampling_number: s,
        }),
    }
}

/// Vanilla parallel objective: one decode from copied inputs, cross-entropy
/// at every position.
pub fn nat_sentence_parts(fwd: &mut Forward, enc: &EncoderOutput, target: &[usize]) -> SentenceParts {
    let t_len = target.len();
    let h = fwd.copy_decoder_inputs(enc, t_len);
    let logits = fwd.decode_parallel(h, enc);
    let token_sum = fwd.tape.cross_entropy_rows(logits, target, &vec![1.0; t_len]);
    let len_terms = fwd.length_terms(enc, t_len);
    SentenceParts {
        token_sum,
        token_count: t_len,
        length_nll: len_terms.nll,
        length_top1: len_terms.top1,
        logits,
        outcome: None,
    }
}

/// Teacher-forced autoregressive objective (BOS-shifted inputs, causal mask).
pub fn at_sentence_parts(fwd: &mut Forward, enc: &EncoderOutput, target: &[usize]) -> SentenceParts {
    let t_len = target.len();
    let mut inputs = Vec::with_capacity(t_len);
    inputs.push(vocab::BOS);
    inputs.extend_from_slice(&target[..t_len - 1]);
    let logits = fwd.at_logits(enc, &inputs);
    let token_sum = fwd.tape.cross_entropy_rows(logits, target, &vec![1.0; t_len]);
    let len_terms = fwd.length_terms(enc, t_len);
    SentenceParts {
        token_sum,
        token_count: t_len,
        length_nll: len_terms.nll,
        length_top1: len_terms.top1,
        logits,
        outcome: None,
    }
}

fn finish_sentence_loss(fwd: &mut Forward, parts: &SentenceParts, length_loss_weight: f64) -> NodeId {
    let token_mean = if parts.token_count > 0 {
        fwd.tape.scale(parts.token_sum, 1.0 / parts.token_count as f64)
    } else {
        // every position revealed: the token loss is an empty sum
        fwd.tape.constant(vec![0.0], [1])
    };
    let len_term = fwd.tape.scale(parts.length_nll, length_loss_weight);
    fwd.tape.add(token_mean, len_term)
}

/// Per-sentence glancing loss and what the step measured/selected.
pub struct GlmStep {
    pub loss: NodeId,
    pub outcome: GlanceOutcome,
    pub logits: NodeId,
}

/// Per-sentence mean loss over non-revealed positions plus the weighted
/// length loss. With `lambda_now = 0` this is exactly the NAT objective.
pub fn glm_train_step(
    fwd: &mut Forward,
    source: &[usize],
    target: &[usize],
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> GlmStep {
    let enc = fwd.encode(source);
    let parts = glm_sentence_parts(fwd, &enc, target, cfg, lambda_now, rng);
    let loss = finish_sentence_loss(fwd, &parts, cfg.length_loss_weight);
    GlmStep { loss, outcome: parts.outcome.expect("glm parts carry an outcome"), logits: parts.logits }
}

/// Per-sentence NAT loss: mean token cross-entropy plus weighted length loss.
pub fn nat_loss(
    fwd: &mut Forward,
    source: &[usize],
    target: &[usize],
    length_loss_weight: f64,
) -> NodeId {
    let enc = fwd.encode(source);
    let parts = nat_sentence_parts(fwd, &enc, target);
    finish_sentence_loss(fwd, &parts, length_loss_weight)
}
