//! Synthetic multiple-choice task for the toy model.
//!
//! A stem is `topic filler.. cue.. ?`. The cue is a short run of cue symbols
//! at the end of the stem; the position it names is the sum of the symbols
//! mod 4, so no single cue token determines it. The continuation lists the
//! topic's four option bodies, rotated so the correct body lands at the
//! labelled position, then `=> id`. The label equals the cued position with
//! probability `cue_strength`; otherwise it is drawn from `bias_prior`.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use super::{ModelError, TokenKind, Vocab, VocabSpec, N_IDENTIFIERS};
use crate::corpus::{identifier, Condition, Corpus, CorpusMeta, McqItem, Task};
use crate::rng;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub cue_strength: f64,
    pub bias_prior: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_fillers")]
    pub stem_fillers: usize,
    /// Number of cue symbols; their sum mod 4 is the cued position.
    #[serde(default = "default_cue_len")]
    pub cue_len: usize,
    #[serde(default)]
    pub vocab: VocabSpec,
}

fn default_fillers() -> usize {
    2
}

fn default_cue_len() -> usize {
    2
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 1000,
            cue_strength: 0.8,
            bias_prior: vec![0.25; N_IDENTIFIERS],
            seed: 0,
            stem_fillers: default_fillers(),
            cue_len: default_cue_len(),
            vocab: VocabSpec::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_items == 0 {
            return bad("n_items must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cue_strength) {
            return bad(format!("cue_strength {} outside [0, 1]", self.cue_strength));
        }
        if self.bias_prior.len() != N_IDENTIFIERS {
            return bad(format!(
                "bias_prior needs {N_IDENTIFIERS} entries, got {}",
                self.bias_prior.len()
            ));
        }
        if self.bias_prior.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("bias_prior entries must be finite and non-negative".into());
        }
        let sum: f64 = self.bias_prior.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("bias_prior sums to {sum}, expected 1"));
        }
        if self.cue_len == 0 {
            return bad("cue_len must be positive".into());
        }
        if self.vocab.n_topics == 0 || (self.stem_fillers > 0 && self.vocab.n_fillers == 0) {
            return bad("vocabulary too small for the stem layout".into());
        }
        Ok(())
    }

    /// Stem length: topic, fillers, cue symbols, terminator.
    pub fn stem_len(&self) -> usize {
        self.stem_fillers + self.cue_len + 2
    }
}

/// Token-level view of a generated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub vocab: VocabSpec,
    pub stems: Vec<Vec<usize>>,
    pub continuations: Vec<Vec<usize>>,
    /// 1-based correct-option position per item.
    pub labels: Vec<usize>,
    /// 0-based position named by each stem's cue pattern.
    pub cues: Vec<usize>,
}

impl TokenDataset {
    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Full training sequences: stem followed by its continuation.
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        self.stems
            .iter()
            .zip(&self.continuations)
            .map(|(s, c)| s.iter().chain(c).copied().collect())
            .collect()
    }

    /// Index of the stem terminator (the final stem token).
    pub fn final_token(&self) -> usize {
        self.stems.first().map_or(0, |s| s.len() - 1)
    }

    pub fn subset(&self, idx: &[usize]) -> TokenDataset {
        TokenDataset {
            vocab: self.vocab,
            stems: idx.iter().map(|&i| self.stems[i].clone()).collect(),
            continuations: idx.iter().map(|&i| self.continuations[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            cues: idx.iter().map(|&i| self.cues[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub dataset: TokenDataset,
    pub corpus: Corpus,
}

/// Continuation tokens for `topic` with the correct body at 1-based `position`.
pub fn continuation(vocab: &Vocab, topic: usize, position: usize) -> Vec<usize> {
    let shift = position - 1;
    let mut out: Vec<usize> = (0..N_IDENTIFIERS)
        .map(|j| vocab.body(topic, (j + N_IDENTIFIERS - shift) % N_IDENTIFIERS))
        .collect();
    out.push(vocab.answer_marker());
    out.push(vocab.identifier(shift));
    out
}

pub fn synth_task(cfg: &SynthConfig) -> Result<SynthTask, ModelError> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.vocab);
    let mut rng = rng::seeded(cfg.seed);
    let prior = WeightedIndex::new(&cfg.bias_prior)
        .map_err(|e| ModelError::InvalidConfig(format!("bias_prior: {e}")))?;
    let mut ds = TokenDataset {
        vocab: cfg.vocab,
        stems: Vec::with_capacity(cfg.n_items),
        continuations: Vec::with_capacity(cfg.n_items),
        labels: Vec::with_capacity(cfg.n_items),
        cues: Vec::with_capacity(cfg.n_items),
    };
    let mut items = Vec::with_capacity(cfg.n_items);
    for n in 0..cfg.n_items {
        let topic = rng.random_range(0..cfg.vocab.n_topics);
        let mut stem = vec![vocab.topic(topic)];
        for _ in 0..cfg.stem_fillers {
            stem.push(vocab.filler(rng.random_range(0..cfg.vocab.n_fillers)));
        }
        let symbols: Vec<usize> = (0..cfg.cue_len)
            .map(|_| rng.random_range(0..N_IDENTIFIERS))
            .collect();
        let cue = symbols.iter().sum::<usize>() % N_IDENTIFIERS;
        let follow: f64 = rng.random();
        let pos0 = if follow < cfg.cue_strength {
            cue
        } else {
            prior.sample(&mut rng)
        };
        stem.extend(symbols.iter().map(|&c| vocab.cue(c)));
        stem.push(vocab.terminator());
        let cont = continuation(&vocab, topic, pos0 + 1);

        let options: Vec<String> = cont[..N_IDENTIFIERS].iter().map(|&t| vocab.symbol(t)).collect();
        let ids: Vec<String> = (0..N_IDENTIFIERS).map(|i| identifier(i, false)).collect();
        items.push(
            McqItem::new(
                vocab.render(&stem),
                options,
                Some(ids),
                identifier(pos0, false),
                n,
                N_IDENTIFIERS,
            )
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?,
        );
        ds.stems.push(stem);
        ds.continuations.push(cont);
        ds.labels.push(pos0 + 1);
        ds.cues.push(cue);
    }
    let meta = CorpusMeta {
        task: Task::Synthetic,
        model_name: "synthetic".into(),
        condition: Condition::Standard,
        group_keys: BTreeMap::new(),
    };
    let corpus = Corpus::with_k(items, meta, N_IDENTIFIERS)
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    Ok(SynthTask {
        dataset: ds,
        corpus,
    })
}

/// A decoded continuation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    /// Option body tokens emitted before the answer marker.
    pub options: Vec<usize>,
    /// 1-based answer position, when the emission is well formed.
    pub answer: Option<usize>,
}

impl Emission {
    pub fn is_valid(&self) -> bool {
        self.answer.is_some()
    }
}

/// Parses `b1 b2 b3 b4 => id`.
///
/// Valid only with exactly four distinct bodies of a single topic, the answer
/// marker and an identifier; anything else yields `answer: None`.
pub fn parse_emission(vocab: &Vocab, tokens: &[usize]) -> Emission {
    let marker = tokens.iter().position(|&t| t == vocab.answer_marker());
    let options: Vec<usize> = tokens[..marker.unwrap_or(tokens.len())].to_vec();
    let answer = marker.and_then(|m| {
        let bodies: Option<Vec<(usize, usize)>> = options
            .iter()
            .map(|&t| match vocab.kind(t) {
                Some(TokenKind::Body { topic, slot }) => Some((topic, slot)),
                _ => None,
            })
            .collect();
        let bodies = bodies?;
        if bodies.len() != N_IDENTIFIERS || bodies.iter().any(|b| b.0 != bodies[0].0) {
            return None;
        }
        let mut slots: Vec<usize> = bodies.iter().map(|b| b.1).collect();
        slots.sort_unstable();
        slots.dedup();
        if slots.len() != N_IDENTIFIERS || tokens.len() != m + 2 {
            return None;
        }
        match vocab.kind(tokens[m + 1]) {
            Some(TokenKind::Identifier(i)) => Some(i + 1),
            _ => None,
        }
    });
    Emission { options, answer }
}
