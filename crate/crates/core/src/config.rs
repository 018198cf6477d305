//! Run configuration: one TOML file plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorConfig;
use crate::decoding::DecodeConfig;
use crate::metrics::{Conditioning, PromptMode, Subset};
use crate::model::ModelConfig;
use crate::training::{AdamWConfig, PromptSource, RewardKind, TrainConfig};

/// The shipped configuration. Desk-scale values are active; full-scale
/// values are noted beside them.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Parse(String),
    #[error("override `{0}`: expected section.key=value")]
    Override(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    /// Learned (non-special) vocabulary size.
    pub budget: usize,
}

/// Training knobs of one stage. Absent keys keep the stage defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub validations_per_epoch: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub grad_clip: Option<f64>,
    pub augment: Option<bool>,
    pub top_k: Option<usize>,
    pub max_prompt: Option<usize>,
    pub max_target: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub validation_patients: Option<usize>,
}

impl StageSection {
    /// Applies the set keys on top of `base`.
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { base.$f = v; })* };
        }
        set!(lr, batch_size, epochs, validations_per_epoch, augment, top_k, max_prompt, max_target, max_new_tokens);
        let o = &mut base.optimizer;
        let d = AdamWConfig::default();
        o.beta1 = self.beta1.unwrap_or(d.beta1);
        o.beta2 = self.beta2.unwrap_or(d.beta2);
        o.eps = self.eps.unwrap_or(d.eps);
        o.weight_decay = self.weight_decay.unwrap_or(d.weight_decay);
        if self.grad_clip.is_some() {
            base.grad_clip = self.grad_clip;
        }
        if self.validation_patients.is_some() {
            base.validation_patients = self.validation_patients;
        }
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub subset: Subset,
    /// Defaults to the radiologist report for longitudinal models.
    pub prompt_mode: Option<PromptMode>,
    /// Embedding service for the reward; the local n-gram encoder otherwise.
    pub reward_endpoint: Option<String>,
    pub reward_timeout_secs: u64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { subset: Subset::All, prompt_mode: None, reward_endpoint: None, reward_timeout_secs: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub seeds: usize,
    pub first_seed: u64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { seeds: 3, first_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: GeneratorConfig,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub teacher_forcing: StageSection,
    /// Teacher forcing of a longitudinal model started from an image-only one.
    pub adaptation: StageSection,
    pub scst: StageSection,
    pub decode: DecodeConfig,
    pub evaluate: EvaluateSection,
    pub compare: CompareSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: GeneratorConfig::default(),
            tokenizer: TokenizerSection { budget: 512 },
            model: ModelConfig::default(),
            teacher_forcing: StageSection::default(),
            adaptation: StageSection::default(),
            scst: StageSection::default(),
            decode: DecodeConfig::default(),
            evaluate: EvaluateSection::default(),
            compare: CompareSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(format!("{assignment} (`{k}` is not a section)")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads `path`, or the shipped defaults when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?,
            None => DEFAULT_CONFIG.to_string(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn teacher_forcing(&self, conditioning: Conditioning) -> TrainConfig {
        let base = TrainConfig { seed: self.seed, ..TrainConfig::teacher_forcing(conditioning) };
        self.teacher_forcing.apply(base)
    }

    pub fn adaptation(&self) -> TrainConfig {
        let base = TrainConfig { seed: self.seed, ..TrainConfig::teacher_forcing(Conditioning::Longitudinal) };
        self.adaptation.apply(base)
    }

    pub fn scst(&self, conditioning: Conditioning, prompt_source: PromptSource, reward: RewardKind) -> TrainConfig {
        let base = TrainConfig { seed: self.seed, reward: Some(reward), ..TrainConfig::scst(conditioning, prompt_source) };
        self.scst.apply(base)
    }
}
