//! Transformer encoder, parallel decoder, autoregressive decoder, decoder
//! input copy mechanisms and the length prediction head.
//!
//! One [`ModelParams`] instance carries all three stacks; the objectives
//! simply leave unused stacks untouched. The token embedding table is shared
//! between encoder input, decoder input replacement and the output softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopyMode {
    Uniform,
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub at_dec_layers: usize,
    pub max_src_len: usize,
    /// Number of length classes; predicted lengths are `1..=l_max`.
    pub l_max: usize,
    pub dropout: f64,
    pub positional: PositionalEncoding,
    pub copy_mode: CopyMode,
    pub soft_copy_tau: f64,
}

impl ModelConfig {
    /// Desk-scale default: small enough to train in seconds-to-minutes.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            enc_layers: 2,
            dec_layers: 2,
            at_dec_layers: 2,
            max_src_len: 32,
            l_max: 64,
            dropout: 0.1,
            positional: PositionalEncoding::Learned,
            copy_mode: CopyMode::Uniform,
            soft_copy_tau: 1.0,
        }
    }

    /// Preset mirroring the small-dataset setting: 5 layers, model size 256.
    pub fn iwslt_small(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 256,
            n_heads: 4,
            ffn_dim: 1024,
            enc_layers: 5,
            dec_layers: 5,
            at_dec_layers: 5,
            max_src_len: 64,
            l_max: 128,
            dropout: 0.1,
            positional: PositionalEncoding::Learned,
            copy_mode: CopyMode::Uniform,
            soft_copy_tau: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.vocab_size <= vocab::RESERVED {
            return bad(format!("vocab_size must exceed {}", vocab::RESERVED));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.l_max == 0 || self.max_src_len == 0 {
            return bad("l_max and max_src_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.soft_copy_tau <= 0.0 {
            return bad("soft_copy_tau must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Decoder positional table size; CTC decodes at twice the source length.
    pub fn dec_pos_len(&self) -> usize {
        self.l_max.max(2 * self.max_src_len)
    }
}

// ---------------------------------------------------------------------------
// Parameter tree, generic over Tensor (storage) vs NodeId (on tape)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Ln<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug)]
pub struct Attn<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Clone, Debug)]
pub struct Ffn<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug)]
pub struct EncLayer<T> {
    pub ln_attn: Ln<T>,
    pub attn: Attn<T>,
    pub ln_ffn: Ln<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug)]
pub struct DecLayer<T> {
    pub ln_self: Ln<T>,
    pub self_attn: Attn<T>,
    pub ln_cross: Ln<T>,
    pub cross_attn: Attn<T>,
    pub ln_ffn: Ln<T>,
    pub ffn: Ffn<T>,
}

#[derive(Clone, Debug)]
pub struct ModelTree<T> {
    pub embed: T,
    pub enc_pos: T,
    pub dec_pos: T,
    pub enc_layers: Vec<EncLayer<T>>,
    pub enc_final_ln: Ln<T>,
    pub dec_layers: Vec<DecLayer<T>>,
    pub dec_final_ln: Ln<T>,
    pub at_layers: Vec<DecLayer<T>>,
    pub at_final_ln: Ln<T>,
    pub len_w: T,
    pub len_b: T,
}

impl<T> Ln<T> {
    fn visit<'a>(&'a self, base: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{base}.gain"), &self.gain);
        f(format!("{base}.bias"), &self.bias);
    }
    fn visit_mut<'a>(&'a mut self, base: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{base}.gain"), &mut self.gain);
        f(format!("{base}.bias"), &mut self.bias);
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Ln<U> {
        Ln { gain: f(&self.gain), bias: f(&self.bias) }
    }
}

impl<T> Attn<T> {
    fn visit<'a>(&'a self, base: &str, f: &mut impl FnMut(String, &'a T)) {
        for (n, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            f(format!("{base}.{n}"), t);
        }
    }
    fn visit_mut<'a>(&'a mut self, base: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (n, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            f(format!("{base}.{n}"), t);
        }
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attn<U> {
        Attn {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }
}

impl<T> Ffn<T> {
    fn visit<'a>(&'a self, base: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{base}.w1"), &self.w1);
        f(format!("{base}.b1"), &self.b1);
        f(format!("{base}.w2"), &self.w2);
        f(format!("{base}.b2"), &self.b2);
    }
    fn visit_mut<'a>(&'a mut self, base: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{base}.w1"), &mut self.w1);
        f(format!("{base}.b1"), &mut self.b1);
        f(format!("{base}.w2"), &mut self.w2);
        f(format!("{base}.b2"), &mut self.b2);
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Ffn<U> {
        Ffn { w1: f(&self.w1), b1: f(&self.b1), w2: f(&self.w2), b2: f(&self.b2) }
    }
}

impl<T> EncLayer<T> {
    fn visit<'a>(&'a self, base: &str, f: &mut impl FnMut(String, &'a T)) {
        self.ln_attn.visit(&format!("{base}.ln_attn"), f);
        self.attn.visit(&format!("{base}.attn"), f);
        self.ln_ffn.visit(&format!("{base}.ln_ffn"), f);
        self.ffn.visit(&format!("{base}.ffn"), f);
    }
    fn visit_mut<'a>(&'a mut self, base: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.ln_attn.visit_mut(&format!("{base}.ln_attn"), f);
        self.attn.visit_mut(&format!("{base}.attn"), f);
        self.ln_ffn.visit_mut(&format!("{base}.ln_ffn"), f);
        self.ffn.visit_mut(&format!("{base}.ffn"), f);
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncLayer<U> {
        EncLayer {
            ln_attn: self.ln_attn.map(f),
            attn: self.attn.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }
}

impl<T> DecLayer<T> {
    fn visit<'a>(&'a self, base: &str, f: &mut impl FnMut(String, &'a T)) {
        self.ln_self.visit(&format!("{base}.ln_self"), f);
        self.self_attn.visit(&format!("{base}.self_attn"), f);
        self.ln_cross.visit(&format!("{base}.ln_cross"), f);
        self.cross_attn.visit(&format!("{base}.cross_attn"), f);
        self.ln_ffn.visit(&format!("{base}.ln_ffn"), f);
        self.ffn.visit(&format!("{base}.ffn"), f);
    }
    fn visit_mut<'a>(&'a mut self, base: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.ln_self.visit_mut(&format!("{base}.ln_self"), f);
        self.self_attn.visit_mut(&format!("{base}.self_attn"), f);
        self.ln_cross.visit_mut(&format!("{base}.ln_cross"), f);
        self.cross_attn.visit_mut(&format!("{base}.cross_attn"), f);
        self.ln_ffn.visit_mut(&format!("{base}.ln_ffn"), f);
        self.ffn.visit_mut(&format!("{base}.ffn"), f);
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecLayer<U> {
        DecLayer {
            ln_self: self.ln_self.map(f),
            self_attn: self.self_attn.map(f),
            ln_cross: self.ln_cross.map(f),
            cross_attn: self.cross_attn.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }
}

impl<T> ModelTree<T> {
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("embed".into(), &self.embed);
        f("enc_pos".into(), &self.enc_pos);
        f("dec_pos".into(), &self.dec_pos);
        for (i, l) in self.enc_layers.iter().enumerate() {
            l.visit(&format!("enc.{i}"), f);
        }
        self.enc_final_ln.visit("enc.final_ln", f);
        for (i, l) in self.dec_layers.iter().enumerate() {
            l.visit(&format!("dec.{i}"), f);
        }
        self.dec_final_ln.visit("dec.final_ln", f);
        for (i, l) in self.at_layers.iter().enumerate() {
            l.visit(&format!("at.{i}"), f);
        }
        self.at_final_ln.visit("at.final_ln", f);
        f("len_head.w".into(), &self.len_w);
        f("len_head.b".into(), &self.len_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        f("embed".into(), &mut self.embed);
        f("enc_pos".into(), &mut self.enc_pos);
        f("dec_pos".into(), &mut self.dec_pos);
        for (i, l) in self.enc_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("enc.{i}"), f);
        }
        self.enc_final_ln.visit_mut("enc.final_ln", f);
        for (i, l) in self.dec_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("dec.{i}"), f);
        }
        self.dec_final_ln.visit_mut("dec.final_ln", f);
        for (i, l) in self.at_layers.iter_mut().enumerate() {
            l.visit_mut(&format!("at.{i}"), f);
        }
        self.at_final_ln.visit_mut("at.final_ln", f);
        f("len_head.w".into(), &mut self.len_w);
        f("len_head.b".into(), &mut self.len_b);
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelTree<U> {
        ModelTree {
            embed: f(&self.embed),
            enc_pos: f(&self.enc_pos),
            dec_pos: f(&self.dec_pos),
            enc_layers: self.enc_layers.iter().map(|l| l.map(f)).collect(),
            enc_final_ln: self.enc_final_ln.map(f),
            dec_layers: self.dec_layers.iter().map(|l| l.map(f)).collect(),
            dec_final_ln: self.dec_final_ln.map(f),
            at_layers: self.at_layers.iter().map(|l| l.map(f)).collect(),
            at_final_ln: self.at_final_ln.map(f),
            len_w: f(&self.len_w),
            len_b: f(&self.len_b),
        }
    }
}

pub type ParamNodes = ModelTree<NodeId>;

// ---------------------------------------------------------------------------
// ModelParams
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub tree: ModelTree<Tensor>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let ff = cfg.ffn_dim;

        let linear = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::randn(rng, [fan_in, fan_out], std).requiring_grad()
        };
        let bias = |n: usize| Tensor::zeros([n]).requiring_grad();
        let ln = || Ln {
            gain: Tensor::new(vec![1.0; d], [d]).requiring_grad(),
            bias: Tensor::zeros([d]).requiring_grad(),
        };
        let attn = |rng: &mut ChaCha8Rng| Attn {
            wq: linear(rng, d, d),
            bq: bias(d),
            wk: linear(rng, d, d),
            bk: bias(d),
            wv: linear(rng, d, d),
            bv: bias(d),
            wo: linear(rng, d, d),
            bo: bias(d),
        };
        let ffn = |rng: &mut ChaCha8Rng| Ffn {
            w1: linear(rng, d, ff),
            b1: bias(ff),
            w2: linear(rng, ff, d),
            b2: bias(d),
        };
        let enc_layer = |rng: &mut ChaCha8Rng| EncLayer {
            ln_attn: ln(),
            attn: attn(rng),
            ln_ffn: ln(),
            ffn: ffn(rng),
        };
        let dec_layer = |rng: &mut ChaCha8Rng| DecLayer {
            ln_self: ln(),
            self_attn: attn(rng),
            ln_cross: ln(),
            cross_attn: attn(rng),
            ln_ffn: ln(),
            ffn: ffn(rng),
        };

        let positional = |rng: &mut ChaCha8Rng, len: usize| match cfg.positional {
            PositionalEncoding::Learned => Tensor::randn(rng, [len, d], 0.02).requiring_grad(),
            PositionalEncoding::Sinusoidal => sinusoidal(len, d),
        };

        let tree = ModelTree {
            embed: Tensor::randn(&mut rng, [cfg.vocab_size, d], 0.02).requiring_grad(),
            enc_pos: positional(&mut rng, cfg.max_src_len + 1),
            dec_pos: positional(&mut rng, cfg.dec_pos_len()),
            enc_layers: (0..cfg.enc_layers).map(|_| enc_layer(&mut rng)).collect(),
            enc_final_ln: ln(),
            dec_layers: (0..cfg.dec_layers).map(|_| dec_layer(&mut rng)).collect(),
            dec_final_ln: ln(),
            at_layers: (0..cfg.at_dec_layers).map(|_| dec_layer(&mut rng)).collect(),
            at_final_ln: ln(),
            len_w: linear(&mut rng, d, cfg.l_max),
            len_b: bias(cfg.l_max),
        };
        ModelParams { cfg: cfg.clone(), tree }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.tree.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.tree.visit_mut(&mut |name, t| out.push((name, t)));
        out
    }

    /// Copy all parameters onto a tape as leaves.
    pub fn enter(&self, tape: &mut Tape) -> ParamNodes {
        self.tree.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    /// Move gradients from tape nodes back into parameter tensors.
    /// Trainable parameters untouched by the loss receive zero gradients so
    /// the optimizer contract (every trainable tensor has a grad) holds.
    pub fn pull_grads(&mut self, tape: &Tape, nodes: &ParamNodes) {
        let mut ids = Vec::new();
        nodes.visit(&mut |name, id| ids.push((name, *id)));
        let mut params = self.named_mut();
        assert_eq!(ids.len(), params.len());
        for ((n1, id), (n2, tensor)) in ids.into_iter().zip(params.iter_mut()) {
            assert_eq!(&n1, n2, "parameter traversal order mismatch");
            if !tensor.requires_grad() {
                continue;
            }
            match tape.grad(id) {
                Some(g) => tensor.accumulate_grad(g),
                None => {
                    let zeros = vec![0.0; tensor.numel()];
                    tensor.accumulate_grad(&zeros);
                }
            }
        }
    }

    /// One optimizer update over all trainable tensors (grads must be
    /// populated, e.g. via [`ModelParams::pull_grads`]).
    pub fn adam_step(&mut self, opt: &mut crate::tensor::Adam) {
        let mut named = self.named_mut();
        let mut refs: Vec<(&str, &mut Tensor)> = named
            .iter_mut()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, t)| (n.as_str(), &mut **t))
            .collect();
        opt.step(&mut refs);
    }

    /// SHA-256-free stable digest of all parameter bytes (FNV-1a over the
    /// little-endian f64 encoding). Sufficient to detect any mutation.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.named() {
            eat(name.as_bytes());
            for v in t.data() {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

fn sinusoidal(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = (p as f64 * freq).sin();
            data[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    Tensor::new(data, [len, d])
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Encoder output split into the per-token block and the length-token row.
/// The decoder cross-attends to `tokens` only.
pub struct EncoderOutput {
    pub tokens: NodeId,
    pub length: NodeId,
    pub src_len: usize,
}

/// Builds forward computations for one model on one tape. Dropout applies
/// only when constructed with [`Forward::train`] and currently enabled.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub nodes: &'a ParamNodes,
    pub cfg: &'a ModelConfig,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
    dropout_on: bool,
}

impl<'a> Forward<'a> {
    pub fn eval(tape: &'a mut Tape, nodes: &'a ParamNodes, cfg: &'a ModelConfig) -> Self {
        Forward { tape, nodes, cfg, dropout_rng: None, dropout_on: false }
    }

    pub fn train(
        tape: &'a mut Tape,
        nodes: &'a ParamNodes,
        cfg: &'a ModelConfig,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        Forward { tape, nodes, cfg, dropout_rng: Some(rng), dropout_on: true }
    }

    /// Temporarily enable/disable dropout (the measurement pass of glancing
    /// training runs without it and must not consume random draws).
    pub fn set_dropout(&mut self, on: bool) {
        self.dropout_on = on;
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_on && self.dropout_rng.is_some() && self.cfg.dropout > 0.0
    }

    fn maybe_dropout(&mut self, x: NodeId) -> NodeId {
        if !self.dropout_on || self.cfg.dropout == 0.0 {
            return x;
        }
        match self.dropout_rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, self.cfg.dropout, rng),
            None => x,
        }
    }

    /// Token embeddings scaled by sqrt(d), shared with the output softmax.
    pub fn embed_tokens(&mut self, ids: &[usize]) -> NodeId {
        let e = self.tape.gather_rows(self.nodes.embed, ids);
        self.tape.scale(e, (self.cfg.d_model as f64).sqrt())
    }

    /// Output logits through the shared embedding matrix: `x . E^T`.
    pub fn output_logits(&mut self, x: NodeId) -> NodeId {
        let et = self.tape.transpose(self.nodes.embed);
        self.tape.matmul(x, et)
    }

    fn ln(&mut self, x: NodeId, p: &Ln<NodeId>) -> NodeId {
        self.tape.layer_norm_rows(x, p.gain, p.bias)
    }

    fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.tape.matmul(x, w);
        self.tape.add_row(y, b)
    }

    /// Multi-head scaled dot-product attention; `causal` masks future keys.
    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, p: &Attn<NodeId>, causal: bool) -> NodeId {
        let heads = self.cfg.n_heads;
        let hd = self.cfg.head_dim();
        let tq = self.tape.value(q_in).rows();
        let tk = self.tape.value(kv_in).rows();

        let q = self.linear(q_in, p.wq, p.bq);
        let k = self.linear(kv_in, p.wk, p.bk);
        let v = self.linear(kv_in, p.wv, p.bv);

        let mask = causal.then(|| {
            let mut m = vec![0.0; tq * tk];
            for r in 0..tq {
                for c in 0..tk {
                    if c > r {
                        m[r * tk + c] = f64::NEG_INFINITY;
                    }
                }
            }
            self.tape.constant(m, [tq, tk])
        });

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice_cols(q, h * hd, hd);
            let kh = self.tape.slice_cols(k, h * hd, hd);
            let vh = self.tape.slice_cols(v, h * hd, hd);
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt);
            let scores = self.tape.scale(scores, 1.0 / (hd as f64).sqrt());
            let scores = match mask {
                Some(m) => self.tape.add(scores, m),
                None => scores,
            };
            let probs = self.tape.softmax_rows(scores);
            head_outputs.push(self.tape.matmul(probs, vh));
        }
        let merged = self.tape.concat_cols(&head_outputs);
        self.linear(merged, p.wo, p.bo)
    }

    fn ffn(&mut self, x: NodeId, p: &Ffn<NodeId>) -> NodeId {
        let h = self.linear(x, p.w1, p.b1);
        let h = self.tape.relu(h);
        self.linear(h, p.w2, p.b2)
    }

    /// Standard transformer encoder over `[LENGTH] ++ src` with pre-norm
    /// residual blocks.
    pub fn encode(&mut self, src: &[usize]) -> EncoderOutput {
        assert!(!src.is_empty(), "contract error: empty source");
        assert!(
            src.len() <= self.cfg.max_src_len,
            "source length {} exceeds configured max {}",
            src.len(),
            self.cfg.max_src_len
        );
        let n = src.len();
        let mut ids = Vec::with_capacity(n + 1);
        ids.push(vocab::LENGTH);
        ids.extend_from_slice(src);

        let emb = self.embed_tokens(&ids);
        let pos = self.tape.slice_rows(self.nodes.enc_pos, 0, n + 1);
        let mut x = self.tape.add(emb, pos);
        x = self.maybe_dropout(x);

        let layers = self.nodes.enc_layers.clone();
        for layer in &layers {
            let normed = self.ln(x, &layer.ln_attn);
            let a = self.attention(normed, normed, &layer.attn, false);
            let a = self.maybe_dropout(a);
            x = self.tape.add(x, a);
            let normed = self.ln(x, &layer.ln_ffn);
            let h = self.ffn(normed, &layer.ffn);
            let h = self.maybe_dropout(h);
            x = self.tape.add(x, h);
        }
        let final_ln = self.nodes.enc_final_ln.clone();
        let x = self.ln(x, &final_ln);
        EncoderOutput {
            tokens: self.tape.slice_rows(x, 1, n),
            length: self.tape.slice_rows(x, 0, 1),
            src_len: n,
        }
    }

    /// Decoder input rows copied from the encoder output: uniform indexing
    /// `floor(t * N / T)` or a distance-softmax soft mixture.
    pub fn copy_decoder_inputs(&mut self, enc: &EncoderOutput, t_len: usize) -> NodeId {
        assert!(t_len >= 1, "target length must be positive");
        let n = enc.src_len;
        match self.cfg.copy_mode {
            CopyMode::Uniform => {
                let idx: Vec<usize> = (0..t_len).map(|t| t * n / t_len).collect();
                self.tape.gather_rows(enc.tokens, &idx)
            }
            CopyMode::Soft => {
                let tau = self.cfg.soft_copy_tau;
                let mut w = vec![0.0; t_len * n];
                for t in 0..t_len {
                    let centre = t as f64 * n as f64 / t_len as f64;
                    let row: Vec<f64> =
                        (0..n).map(|j| -((centre - j as f64).abs()) / tau).collect();
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    for j in 0..n {
                        w[t * n + j] = (row[j] - max).exp() / sum;
                    }
                }
                let wn = self.tape.constant(w, [t_len, n]);
                self.tape.matmul(wn, enc.tokens)
            }
        }
    }

    /// Parallel decoder: unmasked self-attention over all positions plus
    /// cross-attention to the source tokens; logits via the shared embedding.
    pub fn decode_parallel(&mut self, h: NodeId, enc: &EncoderOutput) -> NodeId {
        let t_len = self.tape.value(h).rows();
        assert!(
            t_len <= self.cfg.dec_pos_len(),
            "decode length {} exceeds positional table {}",
            t_len,
            self.cfg.dec_pos_len()
        );
        let pos = self.tape.slice_rows(self.nodes.dec_pos, 0, t_len);
        let mut x = self.tape.add(h, pos);
        x = self.maybe_dropout(x);

        let layers = self.nodes.dec_layers.clone();
        let final_ln = self.nodes.dec_final_ln.clone();
        x = self.decoder_stack(x, enc, &layers, &final_ln, false);
        self.output_logits(x)
    }

    /// Autoregressive decoder logits under teacher forcing; `inputs` is the
    /// BOS-shifted token sequence.
    pub fn at_logits(&mut self, enc: &EncoderOutput, inputs: &[usize]) -> NodeId {
        assert!(!inputs.is_empty());
        assert!(inputs.len() <= self.cfg.dec_pos_len());
        let emb = self.embed_tokens(inputs);
        let pos = self.tape.slice_rows(self.nodes.dec_pos, 0, inputs.len());
        let mut x = self.tape.add(emb, pos);
        x = self.maybe_dropout(x);

        let layers = self.nodes.at_layers.clone();
        let final_ln = self.nodes.at_final_ln.clone();
        x = self.decoder_stack(x, enc, &layers, &final_ln, true);
        self.output_logits(x)
    }

    fn decoder_stack(
        &mut self,
        mut x: NodeId,
        enc: &EncoderOutput,
        layers: &[DecLayer<NodeId>],
        final_ln: &Ln<NodeId>,
        causal: bool,
    ) -> NodeId {
        for layer in layers {
            let normed = self.ln(x, &layer.ln_self);
            let a = self.attention(normed, normed, &layer.self_attn, causal);
            let a = self.maybe_dropout(a);
            x = self.tape.add(x, a);

            let normed = self.ln(x, &layer.ln_cross);
            let a = self.attention(normed, enc.tokens, &layer.cross_attn, false);
            let a = self.maybe_dropout(a);
            x = self.tape.add(x, a);

            let normed = self.ln(x, &layer.ln_ffn);
            let h = self.ffn(normed, &layer.ffn);
            let h = self.maybe_dropout(h);
            x = self.tape.add(x, h);
        }
        self.ln(x, final_ln)
    }

    /// Logits over length classes `1..=l_max` from the length-token row.
    pub fn predict_length_logits(&mut self, enc: &EncoderOutput) -> NodeId {
        self.linear(enc.length, self.nodes.len_w, self.nodes.len_b)
    }

    /// Cross-entropy of the true target length; lengths beyond `l_max` clamp
    /// with a warning.
    pub fn length_nll(&mut self, enc: &EncoderOutput, target_len: usize) -> NodeId {
        self.length_terms(enc, target_len).nll
    }

    /// Length loss plus the head's current argmax length, for accuracy logs.
    pub fn length_terms(&mut self, enc: &EncoderOutput, target_len: usize) -> LengthTerms {
        let logits = self.predict_length_logits(enc);
        let class = if target_len > self.cfg.l_max {
            log::warn!(
                "target length {} exceeds l_max {}; clamping for length loss",
                target_len,
                self.cfg.l_max
            );
            self.cfg.l_max - 1
        } else {
            target_len - 1
        };
        let top1 = crate::decode::top_length_candidates(
            &length_distribution(self.tape, logits),
            1,
        )[0];
        let nll = self.tape.cross_entropy_row(logits, class);
        LengthTerms { nll, top1 }
    }
}

/// Length-head loss node paired with the head's argmax length (1-based).
pub struct LengthTerms {
    pub nll: NodeId,
    pub top1: usize,
}

/// Length distribution (softmax over classes) as plain values.
pub fn length_distribution(tape: &Tape, length_logits: NodeId) -> Vec<f64> {
    let t = tape.value(length_logits);
    crate::tensor::softmax_rows_raw(t.data(), 1, t.numel())
}

/// Mean per-token negative log-likelihood of `target` under teacher forcing,
/// plus the weighted length-prediction loss.
pub fn at_loss(fwd: &mut Forward, source: &[usize], target: &[usize], length_loss_weight: f64) -> NodeId {
    let enc = fwd.encode(source);
    let t_len = target.len();
    let mut inputs = Vec::with_capacity(t_len);
    inputs.push(vocab::BOS);
    inputs.extend_from_slice(&target[..t_len - 1]);
    let logits = fwd.at_logits(&enc, &inputs);
    let tok_sum = fwd.tape.cross_entropy_rows(logits, target, &vec![1.0; t_len]);
    let tok_mean = fwd.tape.scale(tok_sum, 1.0 / t_len as f64);
    let len_nll = fwd.length_nll(&enc, t_len);
    let len_term = fwd.tape.scale(len_nll, length_loss_weight);
    fwd.tape.add(tok_mean, len_term)
}
