//! Run configuration: a JSON object tree merged over documented defaults.
//!
//! Every key of [`RunConfig::default`] may be omitted (a notice is logged
//! and the default used); keys that do not exist there are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{AugmentPolicy, BlobsConfig};
use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::losses::{AnnealConfig, LossConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub blobs: BlobsConfig,
    /// CSV files replacing the generated blobs when set.
    pub train_csv: Option<String>,
    pub test_csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub proj: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            proj: 32,
        }
    }
}

impl EncoderConfig {
    pub fn dims(&self, input: usize) -> EncoderDims {
        EncoderDims::new(input, self.hidden.clone(), self.proj)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimConfig {
    fn validate(&self, what: &str) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("{what}.epochs and {what}.batch_size must be >= 1")));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{what}: lr must be > 0 and momentum in [0, 1)")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub attack: AttackConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig {
                epochs: 100,
                batch_size: 64,
                lr: 0.1,
                momentum: 0.9,
            },
            attack: AttackConfig::pretrain_default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Linear probe on clean data, encoder frozen.
    Lp,
    /// Adversarial linear finetuning, encoder frozen.
    Alf,
    /// Adversarial full finetuning.
    Aff,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Ok(Self::Lp),
            "alf" => Ok(Self::Alf),
            "aff" => Ok(Self::Aff),
            _ => Err(Error::config(format!("unknown finetune mode {s:?} (lp, alf, aff)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Lp,
            optim: OptimConfig {
                epochs: 50,
                batch_size: 64,
                lr: 0.01,
                momentum: 0.9,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Also used by the adversarial finetuning modes.
    pub attack: AttackConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig::eval_default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub augment: AugmentPolicy,
    pub loss: LossConfig,
    pub anneal: AnnealConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for key in b.keys() {
                if !o.contains_key(key) {
                    log::info!("config: {path}{key} not set, using default {}", b[key]);
                }
            }
            for (key, v) in o {
                let sub = format!("{path}{key}.");
                match b.get_mut(&key) {
                    None => {
                        return Err(Error::config(format!("unknown key {path}{key}")));
                    }
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &sub)?,
                    Some(slot) => *slot = v,
                }
            }
            Ok(())
        }
        (_, _) => Err(Error::config(format!("{path} must be an object"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.blobs.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.anneal.validate()?;
        self.pretrain.optim.validate("pretrain.optim")?;
        self.pretrain.attack.validate()?;
        self.finetune.optim.validate("finetune.optim")?;
        self.eval.attack.validate()?;
        self.encoder.dims(self.data.blobs.dim).validate()
    }

    /// Parses a JSON object, filling absent keys from the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(Self::default())?;
        if !over.is_object() {
            return Err(Error::config("the config file must hold a JSON object"));
        }
        merge(&mut base, over, "")?;
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("serializable");
        Sha256::digest(compact.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Same config with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// `# config_sha256=<hex> seed=<n>`, the first line of every CSV output.
pub fn provenance_line(cfg: &RunConfig) -> String {
    format!("# config_sha256={} seed={}", cfg.hash(), cfg.seed)
}

/// Flattened `a.b.c` key paths of a config, for documentation and tests.
pub fn key_paths(cfg: &RunConfig) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        if let Value::Object(m) = v {
            for (k, sub) in m {
                walk(sub, &format!("{prefix}{k}."), out);
            }
        } else {
            out.push(prefix.trim_end_matches('.').to_string());
        }
    }
    let mut out = Vec::new();
    walk(&serde_json::to_value(cfg).expect("serializable"), "", &mut out);
    out
}
