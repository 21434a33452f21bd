//! Run configuration and its content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use posbias::corpus::{Condition, ItemRange, Schema, Task};
use posbias::harness::TokenOffset;
use posbias::probe::{CapturePoint, MlpConfig};
use posbias::rng::derive_seed;
use posbias::steer::Method;
use posbias::toylm::{SynthConfig, ToyLmConfig, TrainConfig, VocabSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// Streams for seeds derived from the master seed.
const MODEL_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const TRAIN_DATA_STREAM: u64 = 10;
const PROBE_DATA_STREAM: u64 = 11;
const STEER_DATA_STREAM: u64 = 12;
const EVAL_DATA_STREAM: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. Sections without an explicit seed derive theirs from it.
    pub seed: u64,
    pub model: ModelSection,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub steer: SteerSection,
    pub intervene: InterveneSection,
    pub analyze: AnalyzeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub n_topics: usize,
    pub n_fillers: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    pub n_items: usize,
    pub cue_strength: f64,
    pub bias_prior: Vec<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub stem_fillers: usize,
    pub cue_len: usize,
    pub train: DataSpec,
    pub probe: DataSpec,
    /// Items whose baseline answers label the steering activations.
    pub steer: DataSpec,
    /// Pool the intervention eval set is drawn from.
    pub eval: DataSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub layers: Vec<usize>,
    pub tokens: Vec<usize>,
    pub seeds: Vec<u64>,
    pub hidden_size: usize,
    /// Hidden sizes for the capacity sweep at the peak site; empty skips it.
    pub capacity_sizes: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_frac: f64,
    pub capture_point: CapturePoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SteerSection {
    pub src: usize,
    pub tgt: usize,
    pub layers: Vec<usize>,
    pub offsets: Vec<TokenOffset>,
    pub methods: Vec<Method>,
    pub random_seeds: Vec<u64>,
    /// Inverse regularization of the classifier direction.
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneSection {
    pub n_eval: usize,
    /// Explicit grid; when absent a geometric grid of `alpha_points` is used.
    pub alphas: Option<Vec<f64>>,
    pub alpha_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub corpora: Vec<CorpusEntry>,
    /// Grouping dimensions to break each corpus down by.
    pub group_by: Vec<String>,
    pub k: usize,
}

/// Corpus metadata supplied next to the data, all fields optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaOverride {
    pub task: Option<Task>,
    pub model_name: Option<String>,
    pub condition: Option<Condition>,
    pub group_keys: BTreeMap<String, BTreeMap<String, ItemRange>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusEntry {
    pub path: PathBuf,
    #[serde(default = "auto_schema")]
    pub schema: Schema,
    pub task: Option<Task>,
    pub model_name: Option<String>,
    pub condition: Option<Condition>,
    #[serde(default)]
    pub group_keys: BTreeMap<String, BTreeMap<String, ItemRange>>,
}

impl CorpusEntry {
    pub fn meta(&self) -> MetaOverride {
        MetaOverride {
            task: self.task,
            model_name: self.model_name.clone(),
            condition: self.condition,
            group_keys: self.group_keys.clone(),
        }
    }
}

fn auto_schema() -> Schema {
    Schema::Auto
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelSection::default(),
            synth: SynthSection::default(),
            train: TrainSection::default(),
            probe: ProbeSection::default(),
            steer: SteerSection::default(),
            intervene: InterveneSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ToyLmConfig::default();
        ModelSection {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq: m.max_seq,
            n_topics: m.vocab.n_topics,
            n_fillers: m.vocab.n_fillers,
            seed: None,
        }
    }
}

impl DataSpec {
    fn new(n_items: usize, cue_strength: f64) -> Self {
        DataSpec {
            n_items,
            cue_strength,
            bias_prior: vec![0.25; 4],
            seed: None,
        }
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::new(1000, 0.8)
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            stem_fillers: s.stem_fillers,
            cue_len: s.cue_len,
            train: DataSpec::new(2000, 0.8),
            probe: DataSpec::new(1000, 0.8),
            steer: DataSpec::new(2000, 0.8),
            eval: DataSpec::new(1200, 0.8),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            grad_clip: t.grad_clip,
            warmup_steps: t.warmup_steps,
            seed: None,
        }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        let m = MlpConfig::default();
        ProbeSection {
            layers: (1..=8).collect(),
            tokens: (0..6).collect(),
            seeds: (0..5).collect(),
            hidden_size: m.hidden_size,
            capacity_sizes: vec![64, 128, 256, 512],
            epochs: m.epochs,
            lr: m.lr,
            batch_size: m.batch_size,
            train_frac: m.train_frac,
            capture_point: CapturePoint::default(),
        }
    }
}

impl Default for SteerSection {
    fn default() -> Self {
        SteerSection {
            src: 1,
            tgt: 2,
            layers: (1..=8).collect(),
            offsets: vec![TokenOffset::Final, TokenOffset::Penultimate],
            methods: vec![Method::MeanDiff, Method::Classifier, Method::Random],
            random_seeds: vec![0, 1, 2],
            c: 1.0,
        }
    }
}

impl Default for InterveneSection {
    fn default() -> Self {
        InterveneSection {
            n_eval: 200,
            alphas: None,
            alpha_points: 9,
        }
    }
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection {
            corpora: Vec::new(),
            group_by: Vec::new(),
            k: 4,
        }
    }
}

/// Which dataset a stage works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Probe,
    Steer,
    Eval,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Probe, Split::Steer, Split::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Probe => "probe",
            Split::Steer => "steer",
            Split::Eval => "eval",
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&raw, path.extension().and_then(|e| e.to_str()))
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parses TOML, or JSON when the extension says so or the text is an object.
    pub fn parse(raw: &str, extension: Option<&str>) -> Result<Self, String> {
        let cfg: RunConfig = if extension == Some("json") || raw.trim_start().starts_with('{') {
            serde_json::from_str(raw).map_err(|e| e.to_string())?
        } else {
            toml::from_str(raw).map_err(|e| e.to_string())?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Canonical form: compact JSON with object keys sorted.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of [`canonical_json`](Self::canonical_json).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.toylm().validate().map_err(|e| e.to_string())?;
        for split in Split::ALL {
            self.synth_config(split).validate().map_err(|e| format!("synth.{}: {e}", split.as_str()))?;
        }
        let max_layer = self.model.n_layers;
        let stem_len = self.synth_config(Split::Train).stem_len();
        if let Some(&l) = self.probe.layers.iter().find(|&&l| l > max_layer) {
            return Err(format!("probe layer {l} exceeds n_layers {max_layer}"));
        }
        if let Some(&t) = self.probe.tokens.iter().find(|&&t| t >= stem_len) {
            return Err(format!("probe token {t} outside a stem of {stem_len} tokens"));
        }
        if let Some(&l) = self.steer.layers.iter().find(|&&l| l == 0 || l > max_layer) {
            return Err(format!("steer layer {l} outside 1..={max_layer}"));
        }
        let s = &self.steer;
        if s.src == s.tgt || !(1..=4).contains(&s.src) || !(1..=4).contains(&s.tgt) {
            return Err(format!("steer src/tgt must be distinct positions in 1..=4, got {}/{}", s.src, s.tgt));
        }
        if !(s.c > 0.0 && s.c.is_finite()) {
            return Err(format!("steer.c must be positive, got {}", s.c));
        }
        if self.intervene.n_eval == 0 {
            return Err("intervene.n_eval must be positive".into());
        }
        match &self.intervene.alphas {
            Some(a)
                if a.is_empty()
                    || a.iter().any(|v| !v.is_finite())
                    || a.windows(2).any(|w| w[0] > w[1]) =>
            {
                return Err("intervene.alphas must be non-empty, finite and ascending".into())
            }
            None if self.intervene.alpha_points == 0 => {
                return Err("intervene.alpha_points must be positive".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn toylm(&self) -> ToyLmConfig {
        let m = &self.model;
        ToyLmConfig {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq: m.max_seq,
            seed: m.seed.unwrap_or_else(|| derive_seed(self.seed, MODEL_STREAM)),
            vocab: self.vocab(),
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec {
            n_topics: self.model.n_topics,
            n_fillers: self.model.n_fillers,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            batch_size: t.batch_size,
            seed: t.seed.unwrap_or_else(|| derive_seed(self.seed, TRAIN_STREAM)),
            grad_clip: t.grad_clip,
            warmup_steps: t.warmup_steps,
        }
    }

    pub fn synth_config(&self, split: Split) -> SynthConfig {
        let (spec, stream) = match split {
            Split::Train => (&self.synth.train, TRAIN_DATA_STREAM),
            Split::Probe => (&self.synth.probe, PROBE_DATA_STREAM),
            Split::Steer => (&self.synth.steer, STEER_DATA_STREAM),
            Split::Eval => (&self.synth.eval, EVAL_DATA_STREAM),
        };
        SynthConfig {
            n_items: spec.n_items,
            cue_strength: spec.cue_strength,
            bias_prior: spec.bias_prior.clone(),
            seed: spec.seed.unwrap_or_else(|| derive_seed(self.seed, stream)),
            stem_fillers: self.synth.stem_fillers,
            cue_len: self.synth.cue_len,
            vocab: self.vocab(),
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        let p = &self.probe;
        MlpConfig {
            hidden_size: p.hidden_size,
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            train_frac: p.train_frac,
        }
    }

    pub fn stem_len(&self) -> usize {
        self.synth_config(Split::Train).stem_len()
    }
}
