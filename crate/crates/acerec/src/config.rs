//! Run configuration: one flat JSON document drives every pipeline stage.
//!
//! Keys can be overridden from the command line with `key=value` pairs
//! (dotted paths are accepted for forward compatibility). All randomness
//! flows from the single `seed`, fanned out per stage by hashing the stage
//! name, so stages can be rerun in isolation.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthParams;
use crate::model::{MergerKind, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad override {0:?}: expected key=value")]
    BadOverride(String),
    #[error("override key {0:?} does not name a config field")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every field has a default; a missing config file means "all defaults".
/// `interactions` and `embeddings` left empty resolve to files inside
/// `out_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    /// Embedding width d.
    pub d: usize,
    /// Digits per semantic ID.
    pub m: usize,
    /// Latent tokens per item (compression ratio r = m/k).
    pub k: usize,
    /// Codewords per digit.
    #[serde(rename = "M")]
    pub codebook_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Interaction steps kept per user sequence.
    pub max_seq_len: usize,
    /// Per-digit matching temperature.
    pub gamma: f64,
    /// Alignment temperature.
    pub tau: f64,
    /// Popularity-debiasing strength.
    pub beta: f64,
    /// Alignment loss weight.
    pub lambda: f64,
    pub tied_codewords: bool,
    pub merger: MergerKind,
    // trainer
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub isa_final_only: bool,
    // tokenizer
    /// Outer OPQ iterations (k-means sweep + rotation update).
    pub opq_iters: usize,
    // data
    /// k-core threshold applied to users and items.
    pub min_interactions: usize,
    // synthetic corpus
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_clusters: usize,
    pub synth_dim: usize,
    pub synth_noise: f64,
    // pipeline
    pub seed: u64,
    pub out_dir: String,
    /// Interaction TSV path; empty means `<out_dir>/interactions.tsv`.
    pub interactions: String,
    /// Item-embedding file path; empty means `<out_dir>/embeddings.bin`.
    pub embeddings: String,
    /// List length for the `recommend` subcommand.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            d: model.d,
            m: model.m,
            k: model.k,
            codebook_size: model.codebook_size,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            ffn_dim: model.ffn_dim,
            max_seq_len: model.max_steps,
            gamma: model.gamma,
            tau: model.tau,
            beta: model.beta,
            lambda: model.lambda,
            tied_codewords: model.tied_codewords,
            merger: model.merger,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            weight_decay: train.weight_decay,
            clip_norm: train.clip_norm,
            isa_final_only: train.isa_final_only,
            opq_iters: 20,
            min_interactions: 5,
            synth_users: SynthParams::default().n_users,
            synth_items: SynthParams::default().n_items,
            synth_clusters: SynthParams::default().n_clusters,
            synth_dim: SynthParams::default().dim,
            synth_noise: SynthParams::default().noise_sigma,
            seed: 7,
            out_dir: "out".into(),
            interactions: String::new(),
            embeddings: String::new(),
            top_k: 10,
        }
    }
}

impl RunConfig {
    /// Parse a JSON config file; `None` yields the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let file = File::open(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                let mut text = String::new();
                BufReader::new(file)
                    .read_to_string(&mut text)
                    .map_err(|source| ConfigError::Io {
                        path: p.to_path_buf(),
                        source,
                    })?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }

    /// Load, apply `key=value` overrides in order, and validate.
    pub fn resolve(path: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let base = Self::load(path)?;
        let resolved = apply_overrides(&base, sets)?;
        resolved.validate()?;
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.opq_iters == 0 {
            return Err(ConfigError::Invalid("opq_iters must be at least 1".into()));
        }
        if self.min_interactions == 0 {
            return Err(ConfigError::Invalid(
                "min_interactions must be at least 1".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be at least 1".into()));
        }
        if self.out_dir.is_empty() {
            return Err(ConfigError::Invalid("out_dir must be non-empty".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            m: self.m,
            k: self.k,
            codebook_size: self.codebook_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_steps: self.max_seq_len,
            gamma: self.gamma,
            tau: self.tau,
            beta: self.beta,
            lambda: self.lambda,
            tied_codewords: self.tied_codewords,
            merger: self.merger,
        }
    }

    /// Trainer settings; the seed is the "train" fanout of the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: seed_for_stage(self.seed, "train"),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            isa_final_only: self.isa_final_only,
        }
    }

    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            n_users: self.synth_users,
            n_items: self.synth_items,
            n_clusters: self.synth_clusters,
            dim: self.synth_dim,
            noise_sigma: self.synth_noise,
        }
    }

    /// Compression ratio r = m/k.
    pub fn compression_ratio(&self) -> f64 {
        self.m as f64 / self.k as f64
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        Path::new(&self.out_dir).join(name)
    }

    pub fn interactions_path(&self) -> PathBuf {
        if self.interactions.is_empty() {
            self.out_path("interactions.tsv")
        } else {
            PathBuf::from(&self.interactions)
        }
    }

    pub fn embeddings_path(&self) -> PathBuf {
        if self.embeddings.is_empty() {
            self.out_path("embeddings.bin")
        } else {
            PathBuf::from(&self.embeddings)
        }
    }

    /// Hex SHA-256 of the canonical JSON serialization. Ties reports to the
    /// exact configuration that produced them.
    pub fn fingerprint(&self) -> String {
        // The output location never affects results, so the same
        // configuration hashes identically wherever its artifacts land.
        let mut probe = self.clone();
        probe.out_dir = String::new();
        let json = serde_json::to_string(&probe).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Derive a stage seed from the run seed: SHA-256 over the little-endian
/// seed followed by the stage name, first eight digest bytes little-endian.
pub fn seed_for_stage(seed: u64, stage: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stage.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Apply `key=value` pairs onto the JSON form of `base`, then deserialize
/// back (which re-checks field names and types). Values parse as JSON when
/// possible and fall back to strings, so `m=16`, `tied_codewords=false`,
/// and `out_dir=run1` all work unquoted.
pub fn apply_overrides(base: &RunConfig, sets: &[String]) -> Result<RunConfig, ConfigError> {
    if sets.is_empty() {
        return Ok(base.clone());
    }
    let mut doc = serde_json::to_value(base)?;
    for raw in sets {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(raw.clone()))?;
        let parsed: serde_json::Value = serde_json::from_str(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        set_path(&mut doc, key, parsed).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    Ok(serde_json::from_value(doc)?)
}

/// Walk a dotted path into nested objects; the final segment must already
/// exist (overrides cannot invent fields).
fn set_path(doc: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Option<()> {
    let mut cursor = doc;
    let mut segments = path.split('.').peekable();
    while let Some(seg) = segments.next() {
        let map = cursor.as_object_mut()?;
        if segments.peek().is_none() {
            let slot = map.get_mut(seg)?;
            *slot = value;
            return Some(());
        }
        cursor = map.get_mut(seg)?;
    }
    None
}
