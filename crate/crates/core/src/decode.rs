//! Inference engines with decoder-pass accounting: single-pass greedy
//! parallel decoding, length-reranked decoding (several length candidates
//! decoded independently, best kept), CTC decoding, and autoregressive
//! greedy decoding for the teacher model.

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_collapse;
use crate::model::{length_distribution, Forward, ModelParams, ParamNodes};
use crate::tensor::{log_softmax_rows_raw, Tape};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    ParallelGreedy,
    Npd,
    Ctc,
    AtGreedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reranker {
    /// Teacher-forced mean log-probability under a separate autoregressive model.
    AtTeacher,
    /// Mean log-probability of the candidate under its own decoding logits.
    #[serde(rename = "self")]
    SelfScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    /// Number of length candidates for reranked decoding.
    pub m: usize,
    pub reranker: Reranker,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { mode: DecodeMode::ParallelGreedy, m: 1, reranker: Reranker::SelfScore }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), crate::CoreError> {
        if self.m == 0 {
            return Err(crate::CoreError::InvalidConfig("candidate count m must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub length: usize,
    pub score: f64,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Decoder invocations spent on this sentence: 1 for single-pass modes,
    /// the candidate count for reranked decoding, the output length for
    /// autoregressive decoding.
    pub decoder_pass_count: usize,
    pub chosen_length: usize,
    /// Per-candidate scores, present for reranked decoding only.
    pub candidates: Option<Vec<Candidate>>,
}

/// Length classes ranked by probability (ties prefer the shorter length),
/// returned as 1-based lengths.
pub fn top_length_candidates(dist: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dist.len()).collect();
    idx.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.into_iter().map(|i| i + 1).collect()
}

/// Reusable decoding context: model (and optional teacher) parameters are
/// entered once on a gradient-free tape; per-sentence scratch is trimmed
/// after every call. Parameters are never mutated.
pub struct Decoder<'p> {
    tape: Tape,
    nodes: ParamNodes,
    params: &'p ModelParams,
    teacher: Option<(&'p ModelParams, ParamNodes)>,
}

impl<'p> Decoder<'p> {
    pub fn new(params: &'p ModelParams, teacher: Option<&'p ModelParams>) -> Self {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let nodes = params.enter(&mut tape);
        let teacher = teacher.map(|t| {
            assert_eq!(
                t.cfg.vocab_size, params.cfg.vocab_size,
                "teacher and model vocabularies must match"
            );
            let tn = t.enter(&mut tape);
            (t, tn)
        });
        Decoder { tape, nodes, params, teacher }
    }

    pub fn decode(&mut self, src: &[usize], cfg: &DecodeConfig) -> DecodeResult {
        let mark = self.tape.mark();
        let res = match cfg.mode {
            DecodeMode::ParallelGreedy => self.greedy_inner(src, None),
            DecodeMode::Npd => self.npd_inner(src, cfg.m, cfg.reranker),
            DecodeMode::Ctc => self.ctc_inner(src),
            DecodeMode::AtGreedy => self.at_inner(src),
        };
        self.tape.truncate(mark);
        res
    }

    /// Single parallel pass at the predicted (or overridden) length.
    pub fn parallel_greedy(&mut self, src: &[usize], length: Option<usize>) -> DecodeResult {
        let mark = self.tape.mark();
        let res = self.greedy_inner(src, length);
        self.tape.truncate(mark);
        res
    }

    fn greedy_inner(&mut self, src: &[usize], length: Option<usize>) -> DecodeResult {
        let cfg = &self.params.cfg;
        let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
        let enc = fwd.encode(src);
        let len = length.unwrap_or_else(|| {
            let logits = fwd.predict_length_logits(&enc);
            top_length_candidates(&length_distribution(fwd.tape, logits), 1)[0]
        });
        let h = fwd.copy_decoder_inputs(&enc, len);
        let logits = fwd.decode_parallel(h, &enc);
        let tokens = fwd.tape.argmax_rows(logits);
        DecodeResult { tokens, decoder_pass_count: 1, chosen_length: len, candidates: None }
    }

    fn npd_inner(&mut self, src: &[usize], m: usize, reranker: Reranker) -> DecodeResult {
        assert!(m >= 1, "candidate count must be positive");
        let cfg = &self.params.cfg;
        let vocab_size = cfg.vocab_size;
        let lengths = {
            let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
            let enc = fwd.encode(src);
            let logits = fwd.predict_length_logits(&enc);
            top_length_candidates(&length_distribution(fwd.tape, logits), m.min(cfg.l_max))
        };

        let mut candidates = Vec::with_capacity(lengths.len());
        for len in lengths {
            let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
            let enc = fwd.encode(src);
            let h = fwd.copy_decoder_inputs(&enc, len);
            let logits = fwd.decode_parallel(h, &enc);
            let tokens = fwd.tape.argmax_rows(logits);
            let score = match reranker {
                Reranker::SelfScore => {
                    let lp = log_softmax_rows_raw(self.tape.data(logits), len, vocab_size);
                    tokens.iter().enumerate().map(|(t, &k)| lp[t * vocab_size + k]).sum::<f64>()
                        / len as f64
                }
                Reranker::AtTeacher => self.teacher_score(src, &tokens),
            };
            candidates.push(Candidate { length: len, score, tokens });
        }

        let best = candidates
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.length.cmp(&b.length))
                    .then(a.tokens.cmp(&b.tokens))
            })
            .map(|(i, _)| i)
            .expect("at least one candidate");
        let chosen = candidates[best].clone();
        DecodeResult {
            tokens: chosen.tokens,
            decoder_pass_count: candidates.len(),
            chosen_length: chosen.length,
            candidates: Some(candidates),
        }
    }

    /// Teacher-forced mean per-token log-probability of `tokens` given `src`
    /// under the autoregressive stack of the teacher model.
    fn teacher_score(&mut self, src: &[usize], tokens: &[usize]) -> f64 {
        let (teacher, teacher_nodes) = match &self.teacher {
            Some((t, tn)) => (*t, tn.clone()),
            None => panic!("reranked decoding with an AT teacher requires teacher parameters"),
        };
        let v = teacher.cfg.vocab_size;
        let mut fwd = Forward::eval(&mut self.tape, &teacher_nodes, &teacher.cfg);
        let enc = fwd.encode(src);
        let mut inputs = Vec::with_capacity(tokens.len());
        inputs.push(vocab::BOS);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = fwd.at_logits(&enc, &inputs);
        let lp = log_softmax_rows_raw(self.tape.data(logits), tokens.len(), v);
        tokens.iter().enumerate().map(|(t, &k)| lp[t * v + k]).sum::<f64>() / tokens.len() as f64
    }

    fn ctc_inner(&mut self, src: &[usize]) -> DecodeResult {
        let cfg = &self.params.cfg;
        let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
        let enc = fwd.encode(src);
        let l_out = 2 * src.len();
        let h = fwd.copy_decoder_inputs(&enc, l_out);
        let logits = fwd.decode_parallel(h, &enc);
        let alignment = fwd.tape.argmax_rows(logits);
        let tokens = ctc_collapse(&alignment, vocab::BLANK);
        let chosen_length = tokens.len();
        DecodeResult { tokens, decoder_pass_count: 1, chosen_length, candidates: None }
    }

    fn at_inner(&mut self, src: &[usize]) -> DecodeResult {
        let cfg = &self.params.cfg;
        let v = cfg.vocab_size;
        let len = {
            let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
            let enc = fwd.encode(src);
            let logits = fwd.predict_length_logits(&enc);
            top_length_candidates(&length_distribution(fwd.tape, logits), 1)[0]
        };
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for _ in 0..len {
            let mut fwd = Forward::eval(&mut self.tape, &self.nodes, cfg);
            let enc = fwd.encode(src);
            let mut inputs = Vec::with_capacity(out.len() + 1);
            inputs.push(vocab::BOS);
            inputs.extend_from_slice(&out);
            let logits = fwd.at_logits(&enc, &inputs);
            let row = out.len();
            let row_logits = &fwd.tape.data(logits)[row * v..(row + 1) * v];
            let mut best = 0usize;
            for (k, &val) in row_logits.iter().enumerate() {
                if val > row_logits[best] {
                    best = k;
                }
            }
            out.push(best);
        }
        DecodeResult {
            decoder_pass_count: out.len(),
            chosen_length: len,
            tokens: out,
            candidates: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_params(seed: u64) -> ModelParams {
        let mut cfg = ModelConfig::toy(14);
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.ffn_dim = 32;
        cfg.max_src_len = 10;
        cfg.l_max = 12;
        cfg.dropout = 0.0;
        ModelParams::init(&cfg, seed)
    }

    #[test]
    fn greedy_single_pass_and_exact_length() {
        let params = tiny_params(1);
        let mut dec = Decoder::new(&params, None);
        let res = dec.parallel_greedy(&[6, 7, 8, 9], None);
        assert_eq!(res.decoder_pass_count, 1);
        assert_eq!(res.tokens.len(), res.chosen_length);

        let forced = dec.parallel_greedy(&[6, 7, 8, 9], Some(5));
        assert_eq!(forced.tokens.len(), 5);
        assert_eq!(forced.chosen_length, 5);
    }

    #[test]
    fn greedy_is_deterministic() {
        let params = tiny_params(2);
        let mut dec = Decoder::new(&params, None);
        let a = dec.parallel_greedy(&[6, 7, 8], None);
        let b = dec.parallel_greedy(&[6, 7, 8], None);
        assert_eq!(a, b);
    }

    #[test]
    fn npd_single_candidate_matches_greedy_bit_exactly() {
        let params = tiny_params(3);
        let mut dec = Decoder::new(&params, None);
        let greedy = dec.decode(&[6, 7, 8, 9], &DecodeConfig::default());
        let npd = dec.decode(
            &[6, 7, 8, 9],
            &DecodeConfig { mode: DecodeMode::Npd, m: 1, reranker: Reranker::SelfScore },
        );
        assert_eq!(npd.tokens, greedy.tokens);
        assert_eq!(npd.chosen_length, greedy.chosen_length);
        assert_eq!(npd.decoder_pass_count, 1);
    }

    #[test]
    fn npd_returns_argmax_scoring_candidate_and_counts_passes() {
        let params = tiny_params(4);
        let mut dec = Decoder::new(&params, None);
        let cfg = DecodeConfig { mode: DecodeMode::Npd, m: 4, reranker: Reranker::SelfScore };
        let res = dec.decode(&[6, 7, 8], &cfg);
        let cands = res.candidates.as_ref().unwrap();
        assert_eq!(res.decoder_pass_count, cands.len());
        assert_eq!(cands.len(), 4);
        let max = cands.iter().map(|c| c.score).fold(f64::NEG_INFINITY, f64::max);
        let chosen = cands.iter().find(|c| c.tokens == res.tokens).unwrap();
        assert_eq!(chosen.score, max);
    }

    #[test]
    fn npd_score_is_monotone_in_candidate_count() {
        let params = tiny_params(5);
        let mut dec = Decoder::new(&params, None);
        let mut last = f64::NEG_INFINITY;
        for m in 1..=5 {
            let cfg = DecodeConfig { mode: DecodeMode::Npd, m, reranker: Reranker::SelfScore };
            let res = dec.decode(&[6, 7, 8, 9, 10], &cfg);
            let best = res
                .candidates
                .unwrap()
                .iter()
                .map(|c| c.score)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= last - 1e-15, "larger candidate sets cannot score worse");
            last = best;
        }
    }

    #[test]
    fn npd_m_beyond_available_lengths_uses_all() {
        let params = tiny_params(6);
        let mut dec = Decoder::new(&params, None);
        let cfg = DecodeConfig { mode: DecodeMode::Npd, m: 999, reranker: Reranker::SelfScore };
        let res = dec.decode(&[6, 7], &cfg);
        assert_eq!(res.decoder_pass_count, params.cfg.l_max);
    }

    #[test]
    fn ctc_output_has_no_blank_and_bounded_length() {
        let params = tiny_params(7);
        let mut dec = Decoder::new(&params, None);
        for src_len in 1..=6usize {
            let src: Vec<usize> = (0..src_len).map(|i| 6 + i % 8).collect();
            let res = dec.decode(&src, &DecodeConfig { mode: DecodeMode::Ctc, ..Default::default() });
            assert_eq!(res.decoder_pass_count, 1);
            assert!(res.tokens.len() <= 2 * src_len);
            assert!(res.tokens.iter().all(|&t| t != vocab::BLANK));
        }
    }

    #[test]
    fn at_pass_count_equals_output_length() {
        let params = tiny_params(8);
        let mut dec = Decoder::new(&params, None);
        let res = dec.decode(&[6, 7, 8], &DecodeConfig { mode: DecodeMode::AtGreedy, ..Default::default() });
        assert_eq!(res.decoder_pass_count, res.tokens.len());
        assert_eq!(res.chosen_length, res.tokens.len());
    }

    #[test]
    fn at_teacher_reranker_scores_candidates() {
        let params = tiny_params(9);
        let teacher = tiny_params(10);
        let mut dec = Decoder::new(&params, Some(&teacher));
        let cfg = DecodeConfig { mode: DecodeMode::Npd, m: 3, reranker: Reranker::AtTeacher };
        let res = dec.decode(&[6, 7, 8, 9], &cfg);
        let cands = res.candidates.unwrap();
        assert_eq!(cands.len(), 3);
        assert!(cands.iter().all(|c| c.score.is_finite()));
    }

    #[test]
    #[should_panic(expected = "requires teacher")]
    fn at_teacher_without_teacher_params_panics() {
        let params = tiny_params(11);
        let mut dec = Decoder::new(&params, None);
        let cfg = DecodeConfig { mode: DecodeMode::Npd, m: 2, reranker: Reranker::AtTeacher };
        dec.decode(&[6, 7], &cfg);
    }
}
