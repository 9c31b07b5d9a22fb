//! CTC: collapse mapping, marginal loss, Viterbi alignment, and the
//! alignment-based glancing step used when output length is decoupled from
//! target length.
//!
//! All dynamic programs run in log space over the blank-interleaved label
//! sequence `[b, y1, b, y2, ..., yT, b]`. Infeasible cases (no alignment of
//! the target fits in the frame count) surface as errors, never as NaNs.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::glm::{self, GlanceOutcome, GlancingConfig, ScheduleKind, SelectionStrategy};
use crate::model::{EncoderOutput, Forward};
use crate::tensor::{log_softmax_rows_raw, NodeId, Tape};
use crate::vocab;

/// Collapse consecutive repeats, then remove blanks.
pub fn ctc_collapse(seq: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = None;
    for &s in seq {
        if Some(s) != prev && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Shortest frame count that still admits an alignment of `labels`:
/// one frame per token plus a separating blank between equal neighbours.
pub fn min_alignment_len(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Distance between sequences of possibly different lengths:
/// `max(|a|, |b|) - LCS(a, b)`. Zero iff the shorter is a subsequence of the
/// longer and lengths allow an exact fill.
pub fn lcs_distance(a: &[usize], b: &[usize]) -> usize {
    a.len().max(b.len()) - lcs_len(a, b)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

// ---------------------------------------------------------------------------
// Log-space forward/backward over the expanded label lattice
// ---------------------------------------------------------------------------

fn expand_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &y in labels {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Allowed to arrive at state `s` directly from `s-2`?
fn skip_ok(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn log_alpha(log_probs: &[f64], l: usize, c: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let ns = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; l * ns];
    alpha[0] = log_probs[ext[0]];
    if ns > 1 {
        alpha[1] = log_probs[ext[1]];
    }
    for t in 1..l {
        for s in 0..ns {
            let stay = alpha[(t - 1) * ns + s];
            let step = if s >= 1 { alpha[(t - 1) * ns + s - 1] } else { f64::NEG_INFINITY };
            let skip = if skip_ok(ext, s, blank) {
                alpha[(t - 1) * ns + s - 2]
            } else {
                f64::NEG_INFINITY
            };
            let prev = lse3(stay, step, skip);
            alpha[t * ns + s] = if prev == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                prev + log_probs[t * c + ext[s]]
            };
        }
    }
    alpha
}

/// Beta excludes the emission at `t`, so `alpha[t][s] + beta[t][s]` is the
/// total log mass of paths passing through state `s` at frame `t`.
fn log_beta(log_probs: &[f64], l: usize, c: usize, ext: &[usize], blank: usize) -> Vec<f64> {
    let ns = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; l * ns];
    beta[(l - 1) * ns + ns - 1] = 0.0;
    if ns > 1 {
        beta[(l - 1) * ns + ns - 2] = 0.0;
    }
    for t in (0..l - 1).rev() {
        for s in 0..ns {
            let mut acc = beta[(t + 1) * ns + s] + log_probs[(t + 1) * c + ext[s]];
            if s + 1 < ns {
                acc = lse2(acc, beta[(t + 1) * ns + s + 1] + log_probs[(t + 1) * c + ext[s + 1]]);
            }
            if s + 2 < ns && skip_ok(ext, s + 2, blank) {
                acc = lse2(acc, beta[(t + 1) * ns + s + 2] + log_probs[(t + 1) * c + ext[s + 2]]);
            }
            beta[t * ns + s] = acc;
        }
    }
    beta
}

/// Negative log of the total probability of all alignments collapsing to
/// `labels`. `None` when no alignment fits.
pub(crate) fn forward_nll(
    log_probs: &[f64],
    l: usize,
    c: usize,
    labels: &[usize],
    blank: usize,
) -> Option<f64> {
    let ext = expand_labels(labels, blank);
    let ns = ext.len();
    let alpha = log_alpha(log_probs, l, c, &ext, blank);
    let last = alpha[(l - 1) * ns + ns - 1];
    let prev = if ns > 1 { alpha[(l - 1) * ns + ns - 2] } else { f64::NEG_INFINITY };
    let log_p = lse2(last, prev);
    if log_p == f64::NEG_INFINITY {
        None
    } else {
        Some(-log_p)
    }
}

/// Gradient of the CTC negative log-likelihood with respect to the raw
/// logits: `p[t][k] - (mass through symbol k at t) / (total mass)`.
pub(crate) fn grad_wrt_logits(
    log_probs: &[f64],
    l: usize,
    c: usize,
    labels: &[usize],
    blank: usize,
) -> Vec<f64> {
    let ext = expand_labels(labels, blank);
    let ns = ext.len();
    let alpha = log_alpha(log_probs, l, c, &ext, blank);
    let beta = log_beta(log_probs, l, c, &ext, blank);
    let last = alpha[(l - 1) * ns + ns - 1];
    let prev = if ns > 1 { alpha[(l - 1) * ns + ns - 2] } else { f64::NEG_INFINITY };
    let log_p = lse2(last, prev);
    assert!(log_p > f64::NEG_INFINITY, "gradient requested for an infeasible ctc case");

    let mut grad = vec![0.0; l * c];
    for t in 0..l {
        let mut log_q = vec![f64::NEG_INFINITY; c];
        for s in 0..ns {
            let m = alpha[t * ns + s] + beta[t * ns + s];
            log_q[ext[s]] = lse2(log_q[ext[s]], m);
        }
        for k in 0..c {
            let p = log_probs[t * c + k].exp();
            let q = if log_q[k] == f64::NEG_INFINITY { 0.0 } else { (log_q[k] - log_p).exp() };
            grad[t * c + k] = p - q;
        }
    }
    grad
}

/// CTC loss as a differentiable scalar on the tape. Input is raw logits of
/// shape `[L x C]`; log-softmax is applied internally.
pub fn ctc_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    blank: usize,
) -> Result<NodeId, CoreError> {
    tape.ctc_nll(logits, labels, blank)
}

/// Highest-probability alignment whose collapse equals `labels` (Viterbi
/// variant of the forward recursion). On score ties the backtrace prefers
/// the blank-state predecessor, then the higher state index.
pub fn best_alignment(
    logits: &[f64],
    l: usize,
    c: usize,
    labels: &[usize],
    blank: usize,
) -> Result<Vec<usize>, CoreError> {
    let infeasible = || CoreError::CtcInfeasible { target_len: labels.len(), output_len: l };
    if min_alignment_len(labels) > l {
        return Err(infeasible());
    }
    let log_probs = log_softmax_rows_raw(logits, l, c);
    let ext = expand_labels(labels, blank);
    let ns = ext.len();

    let mut score = vec![f64::NEG_INFINITY; l * ns];
    let mut back = vec![0usize; l * ns];
    score[0] = log_probs[ext[0]];
    if ns > 1 {
        score[1] = log_probs[ext[1]];
    }
    for t in 1..l {
        for s in 0..ns {
            let mut cands: Vec<usize> = vec![s];
            if s >= 1 {
                cands.push(s - 1);
            }
            if skip_ok(&ext, s, blank) {
                cands.push(s - 2);
            }
            // tie-break preference: blank-symbol predecessor, then higher index
            cands.sort_by_key(|&p| (ext[p] != blank, std::cmp::Reverse(p)));
            let mut best = f64::NEG_INFINITY;
            let mut best_p = s;
            for &p in &cands {
                let v = score[(t - 1) * ns + p];
                if v > best {
                    best = v;
                    best_p = p;
                }
            }
            score[t * ns + s] = if best == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                best + log_probs[t * c + ext[s]]
            };
            back[t * ns + s] = best_p;
        }
    }

    let mut state = ns - 1;
    if ns > 1 && score[(l - 1) * ns + ns - 2] > score[(l - 1) * ns + ns - 1] {
        state = ns - 2;
    }
    if score[(l - 1) * ns + state] == f64::NEG_INFINITY {
        return Err(infeasible());
    }
    let mut states = vec![0usize; l];
    states[l - 1] = state;
    for t in (1..l).rev() {
        state = back[t * ns + state];
        states[t - 1] = state;
    }
    Ok(states.into_iter().map(|s| ext[s]).collect())
}

/// Log-probability of one specific alignment under `[L x C]` logits.
pub fn alignment_log_prob(logits: &[f64], l: usize, c: usize, alignment: &[usize]) -> f64 {
    assert_eq!(alignment.len(), l);
    let log_probs = log_softmax_rows_raw(logits, l, c);
    alignment.iter().enumerate().map(|(t, &k)| log_probs[t * c + k]).sum()
}

// ---------------------------------------------------------------------------
// Glancing with CTC targets
// ---------------------------------------------------------------------------

/// One sentence of CTC-mode glancing training. Output length is fixed to
/// twice the source length. The first (gradient-free) decode provides both
/// the collapsed prediction for the distance and the Viterbi alignment used
/// as the glancing target; the second decode carries the CTC loss.
pub struct CtcGlanceParts {
    /// CTC negative log-likelihood of the whole target (not yet normalized).
    pub token_nll: NodeId,
    /// Target length used for per-token normalization.
    pub token_count: usize,
    pub logits: NodeId,
    pub outcome: GlanceOutcome,
}

/// Gradient-free measurement decode at the CTC frame length: the collapsed
/// prediction (for the distance) and the Viterbi alignment of the target
/// under the current model (the glancing target).
pub struct CtcFirstPass {
    pub y_hat: Vec<usize>,
    pub alignment: Vec<usize>,
    pub distance: usize,
}

pub fn ctc_first_pass(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
) -> Result<CtcFirstPass, CoreError> {
    let l_out = 2 * enc.src_len;
    if min_alignment_len(target) > l_out {
        return Err(CoreError::CtcInfeasible { target_len: target.len(), output_len: l_out });
    }
    let vocab_size = fwd.cfg.vocab_size;

    let mark = fwd.tape.mark();
    fwd.tape.set_recording(false);
    let was_dropout = fwd.dropout_enabled();
    fwd.set_dropout(false);
    let h1 = fwd.copy_decoder_inputs(enc, l_out);
    let logits1 = fwd.decode_parallel(h1, enc);
    let raw_logits = fwd.tape.data(logits1).to_vec();
    let y_hat = ctc_collapse(&fwd.tape.argmax_rows(logits1), vocab::BLANK);
    fwd.set_dropout(was_dropout);
    fwd.tape.set_recording(true);
    fwd.tape.truncate(mark);

    let distance = lcs_distance(target, &y_hat);
    let alignment = best_alignment(&raw_logits, l_out, vocab_size, target, vocab::BLANK)?;
    debug_assert_eq!(ctc_collapse(&alignment, vocab::BLANK), target);
    Ok(CtcFirstPass { y_hat, alignment, distance })
}

pub fn glat_ctc_parts(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CtcGlanceParts, CoreError> {
    let fp = ctc_first_pass(fwd, enc, target)?;
    glat_ctc_parts_with_first_pass(fwd, enc, target, &fp, cfg, lambda_now, rng)
}

/// Learning pass given an already-computed measurement decode.
pub fn glat_ctc_parts_with_first_pass(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
    fp: &CtcFirstPass,
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CtcGlanceParts, CoreError> {
    let l_out = 2 * enc.src_len;
    let align = &fp.alignment;
    let (y_hat, distance) = (&fp.y_hat, fp.distance);

    // glancing positions come from the non-blank frames of the alignment
    let non_blank: Vec<usize> = (0..l_out).filter(|&t| align[t] != vocab::BLANK).collect();
    let mut s = if cfg.strategy == SelectionStrategy::UniformMlm {
        rng.gen_range(1..=target.len())
    } else {
        match cfg.schedule.kind() {
            ScheduleKind::Adaptive => glm::sampling_number(lambda_now, distance, non_blank.len()),
            ScheduleKind::CountBased => {
                glm::sampling_number(lambda_now, target.len(), non_blank.len())
            }
        }
    };
    s = s.min(non_blank.len());
    let mut positions: Vec<usize> = if s == 0 {
        Vec::new()
    } else {
        non_blank.choose_multiple(rng, s).copied().collect()
    };
    positions.sort_unstable();

    let h = fwd.copy_decoder_inputs(enc, l_out);
    let h_glanced = glm::replace_inputs(fwd, h, align, &positions, cfg.input_mode);
    let logits = fwd.decode_parallel(h_glanced, enc);
    let token_nll = fwd.tape.ctc_nll(logits, target, vocab::BLANK)?;

    Ok(CtcGlanceParts {
        token_nll,
        token_count: target.len(),
        logits,
        outcome: GlanceOutcome {
            sampled_positions: positions,
            first_pass: y_hat.clone(),
            distance,
            sampling_number: s,
        },
    })
}

/// Per-sentence CTC glancing loss: per-target-token mean of the CTC
/// negative log-likelihood after one glancing pass.
pub fn glat_ctc_train_step(
    fwd: &mut Forward,
    source: &[usize],
    target: &[usize],
    cfg: &GlancingConfig,
    lambda_now: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, GlanceOutcome), CoreError> {
    let enc = fwd.encode(source);
    let parts = glat_ctc_parts(fwd, &enc, target, cfg, lambda_now, rng)?;
    let loss = fwd.tape.scale(parts.token_nll, 1.0 / parts.token_count as f64);
    Ok((loss, parts.outcome))
}

/// Plain CTC objective (no glancing): a single decode at twice the source
/// length, per-target-token mean negative log-likelihood.
pub fn ctc_sentence_parts(
    fwd: &mut Forward,
    enc: &EncoderOutput,
    target: &[usize],
) -> Result<CtcGlanceParts, CoreError> {
    let l_out = 2 * enc.src_len;
    if min_alignment_len(target) > l_out {
        return Err(CoreError::CtcInfeasible { target_len: target.len(), output_len: l_out });
    }
    let h = fwd.copy_decoder_inputs(enc, l_out);
    let logits = fwd.decode_parallel(h, enc);
    let token_nll = fwd.tape.ctc_nll(logits, target, vocab::BLANK)?;
    Ok(CtcGlanceParts {
        token_nll,
        token_count: target.len(),
        logits,
        outcome: GlanceOutcome {
            sampled_positions: Vec::new(),
            first_pass: Vec::new(),
            distance: 0,
            sampling_number: 0,
        },
    })
}
