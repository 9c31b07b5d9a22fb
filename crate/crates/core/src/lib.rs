//! Desk-scale lab for single-pass parallel sequence transduction.
//!
//! The crate provides everything needed to train and probe small
//! encoder/decoder transformers on synthetic translation tasks:
//!
//! - [`tensor`]: a dense f64 tensor engine with tape-based reverse-mode
//!   autodiff and an Adam optimizer,
//! - [`model`]: transformer encoder, parallel (non-autoregressive) decoder,
//!   autoregressive decoder, decoder-input copy mechanisms and a length head,
//! - [`glm`]: glancing-sample training (two-pass curriculum), the NAT and
//!   masked-LM baselines, distances and sampling-ratio schedules,
//! - [`ctc`]: CTC loss, Viterbi alignment and CTC-mode glancing,
//! - [`decode`]: greedy parallel, length-reranked (NPD), CTC and
//!   autoregressive decoding with decoder-pass accounting,
//! - [`data`]: synthetic corpora, toy distillation, BLEU, repetition ratio
//!   and length-bucketed evaluation,
//! - [`checkpoint`]: a versioned binary container for parameters and
//!   optimizer state with bit-exact round-trips.

pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod error;
pub mod glm;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod vocab;

pub use error::CoreError;
