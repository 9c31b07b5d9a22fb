//! Evaluation reports and table rendering: machine-readable JSON lines plus
//! a human-readable table on standard output.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use glance_core::data::{bleu, length_bucket_eval, repetition_ratio, Corpus};
use glance_core::decode::{DecodeConfig, DecodeMode, Decoder};
use glance_core::model::ModelParams;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BucketRow {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: DecodeMode,
    pub m: usize,
    pub sentences: usize,
    pub bleu: f64,
    pub exact_match: f64,
    pub repetition_ratio: f64,
    /// Decoder invocations per sentence, averaged over the corpus.
    pub mean_decoder_passes: f64,
    /// Canonical per-sentence decoder invocations for the mode: 1 for
    /// single-pass modes, m for length-reranked decoding, the mean output
    /// length for autoregressive decoding.
    pub i_dec: f64,
    pub buckets: Vec<BucketRow>,
}

pub fn evaluate(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    corpus: &Corpus,
    dcfg: &DecodeConfig,
    bucket_width: usize,
) -> EvalReport {
    let mut dec = Decoder::new(params, teacher);
    let sources = corpus.sources();
    let refs = corpus.targets();
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut passes = 0usize;
    for src in &sources {
        let r = dec.decode(src, dcfg);
        passes += r.decoder_pass_count;
        hyps.push(r.tokens);
    }
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    let mean_passes = passes as f64 / corpus.len().max(1) as f64;
    let i_dec = match dcfg.mode {
        DecodeMode::ParallelGreedy | DecodeMode::Ctc => 1.0,
        DecodeMode::Npd => dcfg.m as f64,
        DecodeMode::AtGreedy => mean_passes,
    };
    let buckets = length_bucket_eval(&hyps, &refs, &sources, bucket_width)
        .into_iter()
        .map(|b| BucketRow { lo: b.lo, hi: b.hi, count: b.count, bleu: b.bleu })
        .collect();
    EvalReport {
        mode: dcfg.mode,
        m: dcfg.m,
        sentences: corpus.len(),
        bleu: bleu(&hyps, &refs),
        exact_match: exact as f64 / corpus.len().max(1) as f64,
        repetition_ratio: repetition_ratio(&hyps),
        mean_decoder_passes: mean_passes,
        i_dec,
        buckets,
    }
}

pub fn render_eval(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "sentences          {}", report.sentences).unwrap();
    writeln!(out, "mode               {:?} (m={})", report.mode, report.m).unwrap();
    writeln!(out, "BLEU               {:.2}", report.bleu).unwrap();
    writeln!(out, "exact match        {:.3}", report.exact_match).unwrap();
    writeln!(out, "repetition ratio   {:.4}", report.repetition_ratio).unwrap();
    writeln!(out, "I_dec              {:.2}", report.i_dec).unwrap();
    writeln!(out, "mean decoder passes {:.2}", report.mean_decoder_passes).unwrap();
    writeln!(out, "\nsource length      count   BLEU").unwrap();
    for b in &report.buckets {
        match b.bleu {
            Some(score) => {
                writeln!(out, "[{:>2}, {:>2}]          {:>5}   {:.2}", b.lo, b.hi, b.count, score)
                    .unwrap()
            }
            None => writeln!(out, "[{:>2}, {:>2}]          {:>5}   -", b.lo, b.hi, b.count).unwrap(),
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblateRow {
    pub label: String,
    pub bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu_npd: Option<f64>,
}

pub fn render_ablation(title: &str, rows: &[AblateRow]) -> String {
    let with_npd = rows.iter().any(|r| r.bleu_npd.is_some());
    let mut out = String::new();
    writeln!(out, "{title}").unwrap();
    if with_npd {
        writeln!(out, "{:<28} {:>8} {:>12}", "configuration", "BLEU", "BLEU w/ NPD").unwrap();
    } else {
        writeln!(out, "{:<28} {:>8}", "configuration", "BLEU").unwrap();
    }
    for r in rows {
        match r.bleu_npd {
            Some(n) => writeln!(out, "{:<28} {:>8.2} {:>12.2}", r.label, r.bleu, n).unwrap(),
            None => writeln!(out, "{:<28} {:>8.2}", r.label, r.bleu).unwrap(),
        }
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
