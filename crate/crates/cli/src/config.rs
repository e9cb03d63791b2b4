//! Flat run configuration with dotted keys.
//!
//! Resolution order, later wins: built-in defaults, the config file,
//! `INTERVALREC_*` environment variables, `--set key=value` flags.

use std::collections::BTreeMap;
use std::path::Path;

use intervalrec::baselines::{RankerConfig, Variant};
use intervalrec::lm::{AdapterConfig, BackboneConfig, BackboneInit, IiaConfig, TrainConfig};
use intervalrec::prompt::PromptConfig;
use intervalrec::{Error, Result};

pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("backbone.layers", "4"),
    ("backbone.d_model", "128"),
    ("backbone.heads", "4"),
    ("backbone.ffn", "512"),
    ("backbone.context", "1024"),
    ("backbone.init", "structured_prior"),
    ("backbone.seed", "0"),
    ("adapter.rank", "8"),
    ("adapter.alpha", "16"),
    ("iia.heads", "2"),
    ("iia.d_q", "32"),
    ("embedder.hidden", "64"),
    ("prompt.domain", "game"),
    ("prompt.max_history", "10"),
    ("train.epochs", "5"),
    ("train.batch_size", "32"),
    ("train.lr", "0.001"),
    ("train.warmup_frac", "0.03"),
    ("train.weight_decay", "0.01"),
    ("train.stop_at_val_hr", "none"),
    ("train.patience", "none"),
    ("ranker.d", "64"),
    ("ranker.max_len", "50"),
    ("ranker.clip_days", "256"),
    ("ranker.blocks", "1"),
    ("ranker.epochs", "20"),
    ("ranker.batch_size", "32"),
    ("ranker.lr", "0.001"),
    ("ranker.negatives", "19"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub values: BTreeMap<String, String>,
}

pub fn env_name(key: &str) -> String {
    format!("INTERVALREC_{}", key.to_uppercase().replace('.', "_"))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out)?,
            toml::Value::String(s) => out.push((key, s.clone())),
            toml::Value::Integer(i) => out.push((key, i.to_string())),
            toml::Value::Float(f) => out.push((key, f.to_string())),
            toml::Value::Boolean(b) => out.push((key, b.to_string())),
            other => return Err(Error::Config(format!("config key {key}: unsupported value {other}"))),
        }
    }
    Ok(())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs)?;
        for (k, v) in pairs {
            self.set(&k, &v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{origin}: {m}")),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Defaults, then `file`, then environment, then `overrides`.
    pub fn resolve(file: Option<&Path>, env: impl Fn(&str) -> Option<String>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        let keys: Vec<String> = cfg.values.keys().cloned().collect();
        for k in keys {
            if let Some(v) = env(&env_name(&k)) {
                cfg.set(&k, &v)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("{key} has a default"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key).parse().map_err(|_| Error::Config(format!("{key} = {:?} is not a valid value", self.get(key))))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            "none" | "" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn backbone(&self, vocab: usize) -> Result<(BackboneConfig, BackboneInit, u64)> {
        let config = BackboneConfig {
            layers: self.parse("backbone.layers")?,
            d_model: self.parse("backbone.d_model")?,
            heads: self.parse("backbone.heads")?,
            ffn: self.parse("backbone.ffn")?,
            context: self.parse("backbone.context")?,
            vocab,
        };
        let init = match self.get("backbone.init") {
            "structured_prior" => BackboneInit::StructuredPrior,
            "random" => BackboneInit::Random,
            other => return Err(Error::Config(format!("backbone.init {other:?}; expected structured_prior or random"))),
        };
        Ok((config, init, self.parse("backbone.seed")?))
    }

    pub fn adapter(&self) -> Result<AdapterConfig> {
        Ok(AdapterConfig { rank: self.parse("adapter.rank")?, alpha: self.parse("adapter.alpha")? })
    }

    pub fn iia(&self) -> Result<IiaConfig> {
        Ok(IiaConfig { heads: self.parse("iia.heads")?, d_q: self.parse("iia.d_q")? })
    }

    pub fn embedder_hidden(&self) -> Result<usize> {
        self.parse("embedder.hidden")
    }

    pub fn prompt(&self) -> Result<PromptConfig> {
        Ok(PromptConfig { domain: self.get("prompt.domain").to_string(), max_history: self.parse("prompt.max_history")? })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            lr: self.parse("train.lr")?,
            warmup_frac: self.parse("train.warmup_frac")?,
            weight_decay: self.parse("train.weight_decay")?,
            seed: self.seed()?,
            stop_at_val_hr: self.optional("train.stop_at_val_hr")?,
            patience: self.optional("train.patience")?,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ranker(&self, variant: Variant) -> Result<RankerConfig> {
        let cfg = RankerConfig {
            variant,
            d: self.parse("ranker.d")?,
            max_len: self.parse("ranker.max_len")?,
            clip_days: self.parse("ranker.clip_days")?,
            blocks: self.parse("ranker.blocks")?,
            epochs: self.parse("ranker.epochs")?,
            batch_size: self.parse("ranker.batch_size")?,
            lr: self.parse("ranker.lr")?,
            negatives: self.parse("ranker.negatives")?,
            seed: self.seed()?,
            ..RankerConfig::new(variant)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
