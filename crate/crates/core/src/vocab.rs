//! Reserved token ids shared by every model and corpus in the crate.
//!
//! A vocabulary of size `V` uses ids `0..V`; the first [`RESERVED`] ids are
//! special tokens and never appear inside sentence payloads.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Prepended to every encoder input; its representation feeds the length head.
pub const LENGTH: usize = 3;
/// Decoder-input placeholder for the masked-LM ablation.
pub const MASK: usize = 4;
/// CTC blank symbol; only meaningful for CTC objectives and decoding.
pub const BLANK: usize = 5;

/// Number of reserved ids; payload tokens live in `RESERVED..vocab_size`.
pub const RESERVED: usize = 6;

/// Number of payload tokens available in a vocabulary of `vocab_size` ids.
pub fn payload_size(vocab_size: usize) -> usize {
    assert!(
        vocab_size > RESERVED,
        "vocab_size {vocab_size} leaves no room for payload tokens"
    );
    vocab_size - RESERVED
}
