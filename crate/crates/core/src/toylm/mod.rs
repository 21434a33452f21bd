//! A small pre-norm decoder-only transformer over a symbolic vocabulary.
//!
//! The model exists to be probed and steered: every forward pass can capture
//! the residual stream at any `(layer, token)` site and add `alpha * v` to it
//! before the next layer reads it. Layer 0 is the embedding stream (token plus
//! learned positional embedding); layer `l >= 1` is the residual stream after
//! block `l` has added its attention and MLP outputs.

mod checkpoint;
mod decode;
mod model;
pub mod synth;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use decode::Generation;
pub use model::{ForwardOutput, Model, Params};
pub use synth::{parse_emission, synth_task, Emission, SynthConfig, SynthTask, TokenDataset};
pub use train::{train, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("site (layer {layer}, token {token}) out of range")]
    SiteOutOfRange { layer: usize, token: usize },
    #[error("vector length {got} does not match d_model {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token id {0} outside the vocabulary")]
    TokenOutOfVocab(usize),
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch sequences must share one length")]
    RaggedBatch,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("stem does not end with the terminator symbol")]
    MissingTerminator,
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Number of answer identifiers (and options) in the toy vocabulary.
pub const N_IDENTIFIERS: usize = 4;

/// Sizes of the symbol groups; the symbol table is derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub n_topics: usize,
    pub n_fillers: usize,
}

impl Default for VocabSpec {
    fn default() -> Self {
        VocabSpec {
            n_topics: 8,
            n_fillers: 8,
        }
    }
}

/// Broad class of a token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Topic(usize),
    Filler(usize),
    Cue(usize),
    /// Option body `slot` of `topic`; slot 0 is the correct option.
    Body { topic: usize, slot: usize },
    Identifier(usize),
    Terminator,
    AnswerMarker,
}

/// Symbol table.
///
/// Layout: topics, fillers, cue symbols (one per position), option bodies
/// (four per topic), identifiers `a..d`, the stem terminator `?` and the
/// answer marker `=>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    spec: VocabSpec,
}

impl Vocab {
    pub fn new(spec: VocabSpec) -> Self {
        Vocab { spec }
    }

    pub fn spec(&self) -> VocabSpec {
        self.spec
    }

    pub fn n_topics(&self) -> usize {
        self.spec.n_topics
    }

    fn filler_base(&self) -> usize {
        self.spec.n_topics
    }

    fn cue_base(&self) -> usize {
        self.filler_base() + self.spec.n_fillers
    }

    fn body_base(&self) -> usize {
        self.cue_base() + N_IDENTIFIERS
    }

    fn id_base(&self) -> usize {
        self.body_base() + self.spec.n_topics * N_IDENTIFIERS
    }

    pub fn size(&self) -> usize {
        self.id_base() + N_IDENTIFIERS + 2
    }

    pub fn topic(&self, t: usize) -> usize {
        t
    }

    pub fn filler(&self, f: usize) -> usize {
        self.filler_base() + f
    }

    pub fn cue(&self, pos: usize) -> usize {
        self.cue_base() + pos
    }

    pub fn body(&self, topic: usize, slot: usize) -> usize {
        self.body_base() + topic * N_IDENTIFIERS + slot
    }

    pub fn identifier(&self, pos: usize) -> usize {
        self.id_base() + pos
    }

    pub fn terminator(&self) -> usize {
        self.id_base() + N_IDENTIFIERS
    }

    pub fn answer_marker(&self) -> usize {
        self.terminator() + 1
    }

    pub fn kind(&self, id: usize) -> Option<TokenKind> {
        let kind = if id < self.filler_base() {
            TokenKind::Topic(id)
        } else if id < self.cue_base() {
            TokenKind::Filler(id - self.filler_base())
        } else if id < self.body_base() {
            TokenKind::Cue(id - self.cue_base())
        } else if id < self.id_base() {
            let rel = id - self.body_base();
            TokenKind::Body {
                topic: rel / N_IDENTIFIERS,
                slot: rel % N_IDENTIFIERS,
            }
        } else if id < self.terminator() {
            TokenKind::Identifier(id - self.id_base())
        } else if id == self.terminator() {
            TokenKind::Terminator
        } else if id == self.answer_marker() {
            TokenKind::AnswerMarker
        } else {
            return None;
        };
        Some(kind)
    }

    /// Printable symbol for a token id.
    pub fn symbol(&self, id: usize) -> String {
        match self.kind(id) {
            Some(TokenKind::Topic(t)) => format!("t{t}"),
            Some(TokenKind::Filler(f)) => format!("f{f}"),
            Some(TokenKind::Cue(c)) => format!("q{c}"),
            Some(TokenKind::Body { topic, slot }) => format!("o{}", topic * N_IDENTIFIERS + slot),
            Some(TokenKind::Identifier(i)) => crate::corpus::identifier(i, false),
            Some(TokenKind::Terminator) => "?".into(),
            Some(TokenKind::AnswerMarker) => "=>".into(),
            None => format!("<{id}>"),
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Architecture and initialization seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
    pub vocab: VocabSpec,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            n_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            max_seq: 16,
            seed: 0,
            vocab: VocabSpec::default(),
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_seq < 2 {
            return bad("max_seq must be at least 2");
        }
        if self.vocab.n_topics == 0 {
            return bad("vocabulary needs at least one topic");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// A residual-stream location: layer `0..=L` and 0-based token index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Site {
    pub layer: usize,
    pub token: usize,
}

impl Site {
    pub fn new(layer: usize, token: usize) -> Self {
        Site { layer, token }
    }
}

/// Adds `alpha * vector` to the residual stream at `(layer, token)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub layer: usize,
    pub token: usize,
    pub vector: Vec<f64>,
    pub alpha: f64,
}

impl InjectionSpec {
    pub fn site(&self) -> Site {
        Site::new(self.layer, self.token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trips_kinds() {
        let v = Vocab::new(VocabSpec::default());
        assert_eq!(v.size(), 8 + 8 + 4 + 32 + 4 + 2);
        for id in 0..v.size() {
            let k = v.kind(id).unwrap();
            let back = match k {
                TokenKind::Topic(t) => v.topic(t),
                TokenKind::Filler(f) => v.filler(f),
                TokenKind::Cue(c) => v.cue(c),
                TokenKind::Body { topic, slot } => v.body(topic, slot),
                TokenKind::Identifier(i) => v.identifier(i),
                TokenKind::Terminator => v.terminator(),
                TokenKind::AnswerMarker => v.answer_marker(),
            };
            assert_eq!(back, id);
        }
        assert!(v.kind(v.size()).is_none());
        let ids: Vec<_> = (0..v.size())
            .filter(|&i| matches!(v.kind(i), Some(TokenKind::Identifier(_))))
            .collect();
        assert_eq!(ids.len(), 4);
        assert_eq!(v.symbol(v.identifier(1)), "b");
    }

    #[test]
    fn config_validation() {
        assert!(ToyLmConfig::default().validate().is_ok());
        let bad = ToyLmConfig {
            n_heads: 3,
            ..ToyLmConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
