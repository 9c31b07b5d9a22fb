//! Synthetic translation tasks, toy sequence-level distillation, corpus
//! BLEU, token repetition ratio and length-bucketed evaluation, plus the
//! plain-text corpus file format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DecodeMode, Decoder};
use crate::error::CoreError;
use crate::model::ModelParams;
use crate::vocab;

/// One aligned source/target pair of payload token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<usize>> {
        self.pairs.iter().map(|p| p.target.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transformation {
    /// Elementwise token mapping; target length equals source length.
    MappedCopy,
    /// Mapped copy, then each adjacent pair of positions swaps with
    /// probability one half (drawn from the corpus seed). The swap is not
    /// inferable from the source, so the target distribution is multimodal
    /// and coherent outputs require modelling word interdependency.
    LocalReorder,
    /// Length-changing mapping (tokens drop, stay, or double) to exercise
    /// length prediction and CTC.
    ExpandContract,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub transformation: Transformation,
    pub seed: u64,
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.vocab_size <= vocab::RESERVED {
            return Err(CoreError::InvalidConfig(format!(
                "task vocab_size must exceed {}",
                vocab::RESERVED
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CoreError::InvalidConfig("need 1 <= min_len <= max_len".into()));
        }
        Ok(())
    }

    /// The fixed payload bijection: a rotation of the payload range derived
    /// from the seed (rotation 0 is the identity mapping).
    pub fn payload_map(&self, token: usize) -> usize {
        let p = vocab::payload_size(self.vocab_size);
        let rot = (self.seed % p as u64) as usize;
        vocab::RESERVED + (token - vocab::RESERVED + rot) % p
    }

    fn next_payload(&self, token: usize) -> usize {
        let p = vocab::payload_size(self.vocab_size);
        vocab::RESERVED + (token - vocab::RESERVED + 1) % p
    }
}

/// Mix two seeds into a fresh stream (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic pseudo-random corpus for the given task (stream 0).
pub fn generate_corpus(spec: &SynthTaskSpec, n_pairs: usize) -> Corpus {
    generate_corpus_stream(spec, n_pairs, 0)
}

/// Corpus for a specific sampling stream. Streams share the task identity —
/// the payload mapping comes from the spec seed alone — but draw disjoint
/// sentences, which is how train/validation/test splits are made.
pub fn generate_corpus_stream(spec: &SynthTaskSpec, n_pairs: usize, stream: u64) -> Corpus {
    assert!(n_pairs >= 1, "need at least one pair");
    spec.validate().expect("invalid task spec");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream));
    let payload = vocab::payload_size(spec.vocab_size);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let n = rng.gen_range(spec.min_len..=spec.max_len);
        let source: Vec<usize> =
            (0..n).map(|_| vocab::RESERVED + rng.gen_range(0..payload)).collect();
        let target = transform(spec, &source, &mut rng);
        pairs.push(SentencePair { source, target });
    }
    Corpus { pairs, vocab_size: spec.vocab_size }
}

fn transform(spec: &SynthTaskSpec, source: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    match spec.transformation {
        Transformation::MappedCopy => source.iter().map(|&x| spec.payload_map(x)).collect(),
        Transformation::LocalReorder => {
            // each adjacent pair swaps on a coin drawn from the corpus seed:
            // the order within a pair is not inferable from the source, so
            // per-position training signals are genuinely multimodal and
            // coherent outputs require word-interdependency modelling
            let mut y: Vec<usize> = source.iter().map(|&x| spec.payload_map(x)).collect();
            let mut i = 0;
            while i + 1 < y.len() {
                if rng.gen_bool(0.5) {
                    y.swap(i, i + 1);
                }
                i += 2;
            }
            y
        }
        Transformation::ExpandContract => {
            let mut y = Vec::with_capacity(2 * source.len());
            for &x in source {
                match x % 3 {
                    0 => {}
                    1 => y.push(spec.payload_map(x)),
                    _ => {
                        let m = spec.payload_map(x);
                        y.push(m);
                        y.push(spec.next_payload(m));
                    }
                }
            }
            if y.is_empty() {
                y.push(spec.payload_map(source[0]));
            }
            y
        }
    }
}

/// Replace every target with the teacher's greedy autoregressive decode of
/// the source. Reserved ids in the raw decode are dropped; if a decode comes
/// back empty the original target is kept.
pub fn distill_corpus(corpus: &Corpus, teacher: &ModelParams) -> Corpus {
    let mut dec = Decoder::new(teacher, None);
    let cfg = DecodeConfig { mode: DecodeMode::AtGreedy, ..Default::default() };
    let pairs = corpus
        .pairs
        .iter()
        .map(|p| {
            let raw = dec.decode(&p.source, &cfg).tokens;
            let cleaned: Vec<usize> = raw.into_iter().filter(|&t| t >= vocab::RESERVED).collect();
            SentencePair {
                source: p.source.clone(),
                target: if cleaned.is_empty() { p.target.clone() } else { cleaned },
            }
        })
        .collect();
    Corpus { pairs, vocab_size: corpus.vocab_size }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

const BLEU_MAX_ORDER: usize = 4;

/// Corpus-level BLEU-4 with brevity penalty, scaled to [0, 100].
///
/// Modified n-gram precision with clipping; orders >= 2 whose match count is
/// zero use add-1 smoothing `(0 + 1) / (total + 1)` so short toy sentences do
/// not degenerate the geometric mean. An empty hypothesis corpus scores 0.
pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> f64 {
    assert_eq!(
        hypotheses.len(),
        references.len(),
        "contract error: corpus size mismatch ({} vs {})",
        hypotheses.len(),
        references.len()
    );
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
            if reference.len() >= n {
                for g in reference.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            for g in hyp.windows(n) {
                totals[n - 1] += 1;
                if let Some(c) = ref_counts.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        matches[n - 1] += 1;
                    }
                }
            }
        }
    }

    if hyp_len == 0 {
        return 0.0;
    }
    if matches[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..BLEU_MAX_ORDER {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else if matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let precision = (log_sum / BLEU_MAX_ORDER as f64).exp();
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * precision
}

/// Fraction of tokens equal to their immediate predecessor, corpus-level.
pub fn repetition_ratio(outputs: &[Vec<usize>]) -> f64 {
    let mut repeats = 0usize;
    let mut total = 0usize;
    for s in outputs {
        total += s.len();
        repeats += s.windows(2).filter(|w| w[0] == w[1]).count();
    }
    if total == 0 {
        0.0
    } else {
        repeats as f64 / total as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    /// Inclusive source-length range covered by this bucket.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    /// Corpus BLEU over the bucket; absent when the bucket is empty.
    pub bleu: Option<f64>,
}

/// Corpus BLEU split by source-length interval of the given width.
pub fn length_bucket_eval(
    hypotheses: &[Vec<usize>],
    references: &[Vec<usize>],
    sources: &[Vec<usize>],
    bucket_width: usize,
) -> Vec<LengthBucket> {
    assert!(bucket_width >= 1);
    assert_eq!(hypotheses.len(), references.len());
    assert_eq!(hypotheses.len(), sources.len());
    let max_len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_len == 0 {
        return Vec::new();
    }
    let n_buckets = (max_len - 1) / bucket_width + 1;
    let mut grouped: Vec<Vec<usize>> = vec![Vec::new(); n_buckets];
    for (i, src) in sources.iter().enumerate() {
        grouped[(src.len().max(1) - 1) / bucket_width].push(i);
    }
    grouped
        .into_iter()
        .enumerate()
        .map(|(b, idx)| {
            let score = if idx.is_empty() {
                None
            } else {
                let h: Vec<Vec<usize>> = idx.iter().map(|&i| hypotheses[i].clone()).collect();
                let r: Vec<Vec<usize>> = idx.iter().map(|&i| references[i].clone()).collect();
                Some(bleu(&h, &r))
            };
            LengthBucket {
                lo: b * bucket_width + 1,
                hi: (b + 1) * bucket_width,
                count: idx.len(),
                bleu: score,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Corpus files: `<prefix>.src` / `<prefix>.tgt`, a `vocab <V>` header line,
// then one sentence of space-separated decimal ids per line.
// ---------------------------------------------------------------------------

pub fn save_corpus(corpus: &Corpus, prefix: &Path) -> Result<(), CoreError> {
    save_sentence_file(&side_path(prefix, "src"), corpus.vocab_size, &corpus.sources())?;
    save_sentence_file(&side_path(prefix, "tgt"), corpus.vocab_size, &corpus.targets())?;
    Ok(())
}

/// One sentence of space-separated ids per line, after a `vocab <V>` header.
pub fn save_sentence_file(
    path: &Path,
    vocab_size: usize,
    sentences: &[Vec<usize>],
) -> Result<(), CoreError> {
    let mut out = String::new();
    writeln!(out, "vocab {vocab_size}").unwrap();
    for s in sentences {
        let line: Vec<String> = s.iter().map(|t| t.to_string()).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Counterpart of [`save_sentence_file`]; validates the payload range.
pub fn load_sentence_file(path: &Path) -> Result<(usize, Vec<Vec<usize>>), CoreError> {
    load_side(path)
}

pub fn load_corpus(prefix: &Path) -> Result<Corpus, CoreError> {
    let (src_vocab, sources) = load_side(&side_path(prefix, "src"))?;
    let (tgt_vocab, targets) = load_side(&side_path(prefix, "tgt"))?;
    if src_vocab != tgt_vocab {
        return Err(CoreError::VocabMismatch(format!(
            "source declares vocab {src_vocab}, target declares {tgt_vocab}"
        )));
    }
    if sources.len() != targets.len() {
        return Err(CoreError::VocabMismatch(format!(
            "side line counts differ: {} vs {}",
            sources.len(),
            targets.len()
        )));
    }
    let pairs = sources
        .into_iter()
        .zip(targets)
        .map(|(source, target)| SentencePair { source, target })
        .collect();
    Ok(Corpus { pairs, vocab_size: src_vocab })
}

fn side_path(prefix: &Path, ext: &str) -> std::path::PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}

fn load_side(path: &Path) -> Result<(usize, Vec<Vec<usize>>), CoreError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Checkpoint(format!("{}: empty corpus file", path.display())))?;
    let vocab_size = header
        .strip_prefix("vocab ")
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| {
            CoreError::VocabMismatch(format!("{}: missing `vocab <n>` header", path.display()))
        })?;
    let mut sentences = Vec::new();
    for (ln, line) in lines.enumerate() {
        let mut sent = Vec::new();
        for tok in line.split_whitespace() {
            let id: usize = tok.parse().map_err(|_| {
                CoreError::VocabMismatch(format!("{}:{}: bad token `{tok}`", path.display(), ln + 2))
            })?;
            if id < vocab::RESERVED || id >= vocab_size {
                return Err(CoreError::VocabMismatch(format!(
                    "{}:{}: token {id} outside payload range [{}, {})",
                    path.display(),
                    ln + 2,
                    vocab::RESERVED,
                    vocab_size
                )));
            }
            sent.push(id);
        }
        if sent.is_empty() {
            return Err(CoreError::VocabMismatch(format!(
                "{}:{}: empty sentence",
                path.display(),
                ln + 2
            )));
        }
        sentences.push(sent);
    }
    Ok((vocab_size, sentences))
}
