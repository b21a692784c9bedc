//! Sectioned TOML experiment configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use semisup::nn::EncoderKind;
use semisup::optim::OptimizerKind;
use semisup::pipeline::{content_hash, StudentInit};
use semisup::{Error, Result};

pub const DEFAULT_DATA: &str = "blobs:10:8x8x1:2000/500:7";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub network: NetworkSection,
    pub pretrain: PretrainSection,
    pub lineareval: LinearEvalSection,
    pub finetune: FinetuneSection,
    pub supervised: SupervisedSection,
    pub distill: DistillSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Test-set evaluation period in epochs; 0 evaluates after the last epoch only.
    pub eval_every: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 1, eval_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `blobs:<classes>:<h>x<w>x<c>:<ntrain>/<ntest>:<seed>` or `train.ssds,test.ssds`.
    pub source: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DEFAULT_DATA.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub encoder: EncoderKind,
    pub depth: usize,
    pub width: f64,
    pub head_layers: usize,
    pub output_dim: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Mlp,
            depth: 2,
            width: 1.0,
            head_layers: 3,
            output_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub enabled: bool,
    /// Use this pretrained checkpoint instead of training one.
    pub checkpoint: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_coefficient: f64,
    pub warmup_fraction: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub temperature: f64,
    pub use_queue: bool,
    pub queue_capacity: usize,
    pub ema_decay: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            enabled: true,
            checkpoint: None,
            epochs: 100,
            batch_size: 128,
            lr_coefficient: 0.1,
            warmup_fraction: 0.05,
            optimizer: OptimizerKind::Lars,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coefficient: 0.001,
            temperature: 0.5,
            use_queue: false,
            queue_capacity: 1024,
            ema_decay: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearEvalSection {
    pub enabled: bool,
    pub layer: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LinearEvalSection {
    fn default() -> Self {
        Self {
            enabled: true,
            layer: 0,
            epochs: 60,
            batch_size: 128,
            lr: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub enabled: bool,
    pub label_fraction: f64,
    /// Defaults to 1 below 100% labels and 0 at 100%.
    pub from_layer: Option<usize>,
    /// Defaults to 60 below 10% labels and 30 otherwise.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub lr_coefficient: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub trust_coefficient: f64,
    pub freeze_pretrained: bool,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            enabled: true,
            label_fraction: 0.01,
            from_layer: None,
            epochs: None,
            batch_size: 64,
            lr_coefficient: 0.003,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            trust_coefficient: 0.001,
            freeze_pretrained: false,
        }
    }
}

/// Supervised-from-scratch baseline trained with the `[finetune]` settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub enabled: bool,
}

/// Unset schedule and optimizer keys are taken from `[pretrain]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub enabled: bool,
    /// Teacher checkpoint; defaults to the `[finetune]` result of this run.
    pub teacher: Option<String>,
    /// Student width multiplier; unset distills into the teacher's architecture.
    pub student_width: Option<f64>,
    /// Self-distill the teacher before distilling into a smaller student.
    pub self_distill_first: bool,
    pub alpha: f64,
    /// Defaults to 0.1 for self-distillation and 1.0 otherwise.
    pub temperature: Option<f64>,
    /// Labeled fraction for the supervised term; defaults to `finetune.label_fraction`.
    pub label_fraction: Option<f64>,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr_coefficient: Option<f64>,
    pub warmup_fraction: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub trust_coefficient: Option<f64>,
    pub student_init: StudentInit,
    pub freeze_student_bn: bool,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            enabled: false,
            teacher: None,
            student_width: None,
            self_distill_first: false,
            alpha: 1.0,
            temperature: None,
            label_fraction: None,
            epochs: 40,
            batch_size: None,
            lr_coefficient: None,
            warmup_fraction: None,
            optimizer: None,
            momentum: None,
            weight_decay: None,
            trust_coefficient: None,
            student_init: StudentInit::Random,
            freeze_student_bn: false,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Reads a config file into a raw table.
pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses `section.key=value`. Values are TOML literals; anything that does
/// not parse as one is taken as a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets dotted `key` in `table`, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad config key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Deserializes a raw table; unknown sections or keys are config errors
    /// naming the valid ones.
    pub fn from_table(table: &toml::Table) -> Result<Self> {
        let text = toml::to_string(table).map_err(config_err)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// The config file (if any) with `key=value` overrides applied in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => read_table(p)?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_key(&mut table, &k, v)?;
        }
        Self::from_table(&table)
    }

    /// Fills every default that depends on other keys.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let f = &mut c.finetune;
        f.from_layer.get_or_insert(if f.label_fraction >= 1.0 { 0 } else { 1 });
        f.epochs.get_or_insert(if f.label_fraction < 0.1 { 60 } else { 30 });
        let p = &c.pretrain;
        let d = &mut c.distill;
        d.label_fraction.get_or_insert(c.finetune.label_fraction);
        d.batch_size.get_or_insert(p.batch_size);
        d.lr_coefficient.get_or_insert(p.lr_coefficient);
        d.warmup_fraction.get_or_insert(p.warmup_fraction);
        d.optimizer.get_or_insert(p.optimizer);
        d.momentum.get_or_insert(p.momentum);
        d.weight_decay.get_or_insert(p.weight_decay);
        d.trust_coefficient.get_or_insert(p.trust_coefficient);
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Content hash of the resolved config.
    pub fn hash(&self) -> String {
        content_hash(&self.resolved())
    }
}
