//! Short training runs that check the learning behaviour the modules
//! promise: the teacher masters a copy task, distillation reproduces it,
//! the length head learns equal lengths, the parallel loss decreases, and
//! revealing alignment tokens makes the CTC loss easier.

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use glance_core::ctc;
use glance_core::data::{
    derive_seed, distill_corpus, generate_corpus, generate_corpus_stream, Corpus, SynthTaskSpec,
    Transformation,
};
use glance_core::decode::Decoder;
use glance_core::glm::{self, GlancingConfig};
use glance_core::model::{Forward, ModelConfig, ModelParams};
use glance_core::tensor::{Adam, Tape};
use glance_core::vocab;

#[derive(Clone, Copy)]
enum Objective {
    At,
    Nat,
    GlatCtc,
}

fn tiny_model(vocab_size: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vocab_size);
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.ffn_dim = 64;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.at_dec_layers = 1;
    cfg.max_src_len = 8;
    cfg.l_max = 16;
    cfg
}

/// Minimal training loop used as a fixture; the production trainer lives in
/// the CLI crate and is deliberately not reused here.
fn train(
    corpus: &Corpus,
    cfg: &ModelConfig,
    objective: Objective,
    steps: usize,
    seed: u64,
    losses: Option<&mut Vec<f64>>,
) -> ModelParams {
    let batch = 16;
    let base_lr = 2e-3;
    let warmup = 100.0;
    let mut params = ModelParams::init(cfg, seed);
    let mut opt = Adam::new(base_lr);
    let mut loss_log = losses;

    for step in 0..steps {
        let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * step as u64));
        let mut model_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * step as u64 + 1));
        let mut tape = Tape::new();
        let nodes = params.enter(&mut tape);
        let mut fwd = Forward::train(&mut tape, &nodes, cfg, &mut model_rng);

        let mut sentence_losses = Vec::with_capacity(batch);
        for _ in 0..batch {
            let pair = &corpus.pairs[batch_rng.gen_range(0..corpus.pairs.len())];
            let loss = match objective {
                Objective::At => {
                    glance_core::model::at_loss(&mut fwd, &pair.source, &pair.target, 0.1)
                }
                Objective::Nat => glm::nat_loss(&mut fwd, &pair.source, &pair.target, 0.1),
                Objective::GlatCtc => {
                    match ctc::glat_ctc_train_step(
                        &mut fwd,
                        &pair.source,
                        &pair.target,
                        &GlancingConfig::default(),
                        0.5,
                        &mut batch_rng,
                    ) {
                        Ok((loss, _)) => loss,
                        Err(_) => continue,
                    }
                }
            };
            sentence_losses.push(loss);
        }
        let mut total = sentence_losses[0];
        for &l in &sentence_losses[1..] {
            total = fwd.tape.add(total, l);
        }
        let loss = fwd.tape.scale(total, 1.0 / sentence_losses.len() as f64);
        if let Some(log) = loss_log.as_deref_mut() {
            log.push(tape.data(loss)[0]);
        }
        tape.backward(loss);
        params.pull_grads(&tape, &nodes);
        opt.lr = base_lr * (1.0f64).min((step as f64 + 1.0) / warmup);
        params.adam_step(&mut opt);
    }
    params
}

fn copy_spec(seed_rot_zero: u64) -> SynthTaskSpec {
    SynthTaskSpec {
        vocab_size: 16,
        min_len: 2,
        max_len: 6,
        transformation: Transformation::MappedCopy,
        seed: seed_rot_zero,
    }
}

/// Shared fixture: an AT teacher trained on the identity copy task.
static COPY_TEACHER: Lazy<(Corpus, Corpus, ModelParams)> = Lazy::new(|| {
    // payload size 10; seed 30 is a multiple, so the payload map is identity
    let spec = copy_spec(30);
    let train_corpus = generate_corpus(&spec, 600);
    let test_corpus = generate_corpus_stream(&spec, 120, 2);
    let cfg = tiny_model(16);
    let teacher = train(&train_corpus, &cfg, Objective::At, 1500, 7, None);
    (train_corpus, test_corpus, teacher)
});

#[test]
fn at_teacher_reproduces_the_copy_task() {
    let (_, test_corpus, teacher) = &*COPY_TEACHER;
    let mut dec = Decoder::new(teacher, None);
    let mut exact = 0usize;
    for pair in &test_corpus.pairs {
        let out = dec.decode(
            &pair.source,
            &glance_core::decode::DecodeConfig {
                mode: glance_core::decode::DecodeMode::AtGreedy,
                ..Default::default()
            },
        );
        if out.tokens == pair.target {
            exact += 1;
        }
    }
    let rate = exact as f64 / test_corpus.len() as f64;
    assert!(rate >= 0.99, "teacher exact match {rate:.3} below 0.99");
}

#[test]
fn distillation_reproduces_targets_and_is_idempotent() {
    let (train_corpus, _, teacher) = &*COPY_TEACHER;
    let distilled = distill_corpus(train_corpus, teacher);
    assert_eq!(distilled.len(), train_corpus.len());
    let same = distilled
        .pairs
        .iter()
        .zip(&train_corpus.pairs)
        .filter(|(a, b)| a.target == b.target)
        .count();
    let rate = same as f64 / train_corpus.len() as f64;
    assert!(rate >= 0.99, "distilled targets match originals at {rate:.3} < 0.99");

    let twice = distill_corpus(&distilled, teacher);
    assert_eq!(twice, distilled, "greedy distillation must be idempotent");
}

#[test]
fn length_head_learns_equal_lengths() {
    // mapped copy with a non-identity rotation: lengths always match
    let spec = SynthTaskSpec { seed: 3, ..copy_spec(0) };
    let train_corpus = generate_corpus(&spec, 600);
    let held_out = generate_corpus_stream(&spec, 150, 2);
    let cfg = tiny_model(16);
    let params = train(&train_corpus, &cfg, Objective::Nat, 1200, 11, None);

    let mut tape = Tape::new();
    let nodes = params.enter(&mut tape);
    let mut hits = 0usize;
    for pair in &held_out.pairs {
        let mark = tape.mark();
        let mut fwd = Forward::eval(&mut tape, &nodes, &cfg);
        let enc = fwd.encode(&pair.source);
        let logits = fwd.predict_length_logits(&enc);
        let dist = glance_core::model::length_distribution(&tape, logits);
        let top = glance_core::decode::top_length_candidates(&dist, 1)[0];
        if top == pair.source.len() {
            hits += 1;
        }
        tape.truncate(mark);
    }
    let acc = hits as f64 / held_out.len() as f64;
    assert!(acc >= 0.95, "length accuracy {acc:.3} below 0.95");
}

#[test]
fn nat_loss_decreases_in_smoothed_average() {
    let spec = SynthTaskSpec { seed: 5, ..copy_spec(0) };
    let corpus = generate_corpus(&spec, 400);
    let cfg = tiny_model(16);
    let mut losses = Vec::new();
    let _ = train(&corpus, &cfg, Objective::Nat, 200, 13, Some(&mut losses));
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        tail < 0.5 * head,
        "training should clearly reduce the loss (start {head:.3}, end {tail:.3})"
    );
}

#[test]
fn nat_loss_at_random_init_is_near_log_vocab() {
    let spec = SynthTaskSpec { seed: 6, ..copy_spec(0) };
    let corpus = generate_corpus(&spec, 64);
    let mut cfg = tiny_model(16);
    cfg.dropout = 0.0;
    let params = ModelParams::init(&cfg, 17);
    let mut tape = Tape::new();
    let nodes = params.enter(&mut tape);
    let mut fwd = Forward::eval(&mut tape, &nodes, &cfg);
    let mut total = 0.0;
    let mut count = 0.0;
    for pair in corpus.pairs.iter().take(32) {
        // token loss only: length head contributes separately
        let enc = fwd.encode(&pair.source);
        let parts = glm::nat_sentence_parts(&mut fwd, &enc, &pair.target);
        total += fwd.tape.data(parts.token_sum)[0];
        count += parts.token_count as f64;
    }
    let per_token = total / count;
    let uniform = (cfg.vocab_size as f64).ln();
    assert!(
        (per_token - uniform).abs() / uniform < 0.1,
        "per-token loss {per_token:.3} should sit near ln V = {uniform:.3}"
    );
}

#[test]
fn revealing_alignment_tokens_lowers_the_ctc_loss() {
    // the reorder task stays multimodal, so the model keeps a residual
    // uncertainty that revealed alignment tokens resolve
    let spec = SynthTaskSpec {
        vocab_size: 16,
        min_len: 2,
        max_len: 6,
        transformation: Transformation::LocalReorder,
        seed: 9,
    };
    let corpus = generate_corpus(&spec, 500);
    let held_out = generate_corpus_stream(&spec, 80, 2);
    let cfg = tiny_model(16);
    let params = train(&corpus, &cfg, Objective::GlatCtc, 600, 19, None);

    let mut tape = Tape::new();
    let nodes = params.enter(&mut tape);
    let mut better = 0usize;
    let mut evaluated = 0usize;
    for pair in &held_out.pairs {
        let l_out = 2 * pair.source.len();
        if ctc::min_alignment_len(&pair.target) > l_out {
            continue;
        }
        let mark = tape.mark();
        let mut fwd = Forward::eval(&mut tape, &nodes, &cfg);
        let enc = fwd.encode(&pair.source);

        // measurement decode for the alignment
        let h_probe = fwd.copy_decoder_inputs(&enc, l_out);
        let probe_logits = fwd.decode_parallel(h_probe, &enc);
        let raw = fwd.tape.data(probe_logits).to_vec();
        let align = match ctc::best_alignment(&raw, l_out, cfg.vocab_size, &pair.target, vocab::BLANK)
        {
            Ok(a) => a,
            Err(_) => {
                tape.truncate(mark);
                continue;
            }
        };
        let non_blank: Vec<usize> = (0..l_out).filter(|&t| align[t] != vocab::BLANK).collect();

        let loss_of = |fwd: &mut Forward, positions: &[usize]| {
            let h = fwd.copy_decoder_inputs(&enc, l_out);
            let h = glm::replace_inputs(fwd, h, &align, positions, glm::InputMode::EncoderCopy);
            let logits = fwd.decode_parallel(h, &enc);
            let nll = fwd.tape.ctc_nll(logits, &pair.target, vocab::BLANK).unwrap();
            fwd.tape.data(nll)[0]
        };
        let mut fwd = Forward::eval(&mut tape, &nodes, &cfg);
        let with_all = loss_of(&mut fwd, &non_blank);
        let with_none = loss_of(&mut fwd, &[]);
        evaluated += 1;
        if with_all <= with_none {
            better += 1;
        }
        tape.truncate(mark);
    }
    assert!(evaluated >= 50, "too few feasible sentences ({evaluated})");
    let frac = better as f64 / evaluated as f64;
    assert!(frac >= 0.9, "revealing the alignment helped on only {frac:.2} of sentences");
}
