//! Run configuration: `key = value` text merged with overrides.
//!
//! Every key has a default; unknown keys are rejected. Typed views for each
//! module are built on demand and validated there.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::backbone::BackboneConfig;
use crate::data::synth::{SynthTaskConfig, GRAMMAR_ID};
use crate::data::DEFAULT_PLACEHOLDER;
use crate::heads::Task;
use crate::rtd::{GeneratorConfig, PretrainConfig, SyntheticCorpusConfig};
use crate::tensor::Activation;
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for {key}: {detail}")]
    Invalid { key: String, detail: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: {detail}")]
    Syntax { line: usize, detail: String },
}

/// Known keys and their defaults, in echo order.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "13"),
    ("data.placeholder", DEFAULT_PLACEHOLDER),
    ("model.vocab_size", "512"),
    ("model.d_model", "64"),
    ("model.n_layers", "2"),
    ("model.n_heads", "4"),
    ("model.d_ff", "256"),
    ("model.max_seq_len", "128"),
    ("model.dropout", "0.1"),
    ("corpus.n_sentences", "6000"),
    ("corpus.min_len", "9"),
    ("corpus.max_len", "24"),
    ("corpus.grammar", GRAMMAR_ID),
    ("corpus.heldout_sentences", "400"),
    ("task.train_instances", "480"),
    ("task.dev_instances", "160"),
    ("task.test_instances", "160"),
    ("task.skew", "0.5"),
    ("task.jitter", "0.3"),
    ("generator.d_model", "32"),
    ("generator.n_layers", "1"),
    ("generator.n_heads", "2"),
    ("generator.d_ff", "64"),
    ("pretrain.steps", "2000"),
    ("pretrain.batch_size", "16"),
    ("pretrain.learning_rate", "2e-3"),
    ("pretrain.generator_learning_rate", "5e-3"),
    ("pretrain.mask_rate", "0.15"),
    ("pretrain.warmup_ratio", "0.1"),
    ("pretrain.weight_decay", "0.01"),
    ("pretrain.grad_clip", "1.0"),
    ("pretrain.lm_activation", "gelu"),
    ("finetune.task", "classification"),
    ("finetune.learning_rate", "1e-3"),
    ("finetune.batch_size", "16"),
    ("finetune.epochs", "5"),
    ("finetune.warmup_ratio", "0.1"),
    ("finetune.weight_decay", "0.01"),
    ("finetune.dropout", "0.1"),
    ("finetune.head_dropout", "0.1"),
    ("finetune.lm_head_reuse", "true"),
    ("finetune.freeze_lm_head", "false"),
    ("finetune.grad_clip", "1.0"),
    ("finetune.lr_grid", "5e-4,7e-4,9e-4,1e-3"),
    ("finetune.batch_grid", "16,24,32"),
];

/// Flat key/value configuration with defaults for every known key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(k, _)| *k)
    }

    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                detail: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            detail: format!("expected key=value, got {pair:?}"),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        raw.parse().map_err(|e: T::Err| ConfigError::Invalid {
            key: key.to_string(),
            detail: format!("{raw:?}: {e}"),
        })
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key)?;
        let items = raw
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|e: T::Err| ConfigError::Invalid {
                    key: key.to_string(),
                    detail: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<T>, _>>()?;
        if items.is_empty() {
            return Err(ConfigError::Invalid {
                key: key.to_string(),
                detail: "empty list".into(),
            });
        }
        Ok(items)
    }

    /// `0` or `off` disables clipping.
    fn clip(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        if matches!(self.get(key)?, "off" | "none") {
            return Ok(None);
        }
        let v: f64 = self.typed(key)?;
        Ok((v > 0.0).then_some(v))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.typed("seed")
    }

    pub fn placeholder(&self) -> Result<String, ConfigError> {
        let p = self.get("data.placeholder")?;
        if p.is_empty() || p.chars().any(char::is_whitespace) {
            return Err(ConfigError::Invalid {
                key: "data.placeholder".into(),
                detail: format!("{p:?} must be a non-empty word"),
            });
        }
        Ok(p.to_string())
    }

    pub fn backbone(&self) -> Result<BackboneConfig, ConfigError> {
        let c = BackboneConfig {
            vocab_size: self.typed("model.vocab_size")?,
            d_model: self.typed("model.d_model")?,
            n_layers: self.typed("model.n_layers")?,
            n_heads: self.typed("model.n_heads")?,
            d_ff: self.typed("model.d_ff")?,
            max_seq_len: self.typed("model.max_seq_len")?,
            dropout_p: self.typed("model.dropout")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn corpus(&self) -> Result<SyntheticCorpusConfig, ConfigError> {
        let c = SyntheticCorpusConfig {
            n_sentences: self.typed("corpus.n_sentences")?,
            min_len: self.typed("corpus.min_len")?,
            max_len: self.typed("corpus.max_len")?,
            vocab_size: self.typed("model.vocab_size")?,
            seed: self.seed()?,
            grammar: self.get("corpus.grammar")?.to_string(),
        };
        c.validate(self.typed("model.max_seq_len")?)?;
        Ok(c)
    }

    pub fn heldout_sentences(&self) -> Result<usize, ConfigError> {
        self.typed("corpus.heldout_sentences")
    }

    pub fn generator(&self) -> Result<GeneratorConfig, ConfigError> {
        let c = GeneratorConfig {
            d_model: self.typed("generator.d_model")?,
            n_layers: self.typed("generator.n_layers")?,
            n_heads: self.typed("generator.n_heads")?,
            d_ff: self.typed("generator.d_ff")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig, ConfigError> {
        let act = self.get("pretrain.lm_activation")?;
        let c = PretrainConfig {
            steps: self.typed("pretrain.steps")?,
            batch_size: self.typed("pretrain.batch_size")?,
            learning_rate: self.typed("pretrain.learning_rate")?,
            generator_learning_rate: self.typed("pretrain.generator_learning_rate")?,
            mask_rate: self.typed("pretrain.mask_rate")?,
            warmup_ratio: self.typed("pretrain.warmup_ratio")?,
            weight_decay: self.typed("pretrain.weight_decay")?,
            grad_clip: self.clip("pretrain.grad_clip")?,
            lm_activation: Activation::parse(act).ok_or_else(|| ConfigError::Invalid {
                key: "pretrain.lm_activation".into(),
                detail: format!("{act:?} is not one of tanh, gelu, sigmoid"),
            })?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn synth_task(&self) -> Result<SynthTaskConfig, ConfigError> {
        let c = SynthTaskConfig {
            train_instances: self.typed("task.train_instances")?,
            dev_instances: self.typed("task.dev_instances")?,
            test_instances: self.typed("task.test_instances")?,
            skew: self.typed("task.skew")?,
            jitter: self.typed("task.jitter")?,
            seed: self.seed()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn finetune(&self) -> Result<TrainConfig, ConfigError> {
        let task = self.get("finetune.task")?;
        let c = TrainConfig {
            task: Task::parse(task).ok_or_else(|| ConfigError::Invalid {
                key: "finetune.task".into(),
                detail: format!("{task:?} is not classification or regression"),
            })?,
            learning_rate: self.typed("finetune.learning_rate")?,
            batch_size: self.typed("finetune.batch_size")?,
            epochs: self.typed("finetune.epochs")?,
            warmup_ratio: self.typed("finetune.warmup_ratio")?,
            weight_decay: self.typed("finetune.weight_decay")?,
            dropout_p: self.typed("finetune.dropout")?,
            head_dropout_p: self.typed("finetune.head_dropout")?,
            seed: self.seed()?,
            lm_head_reuse: self.typed("finetune.lm_head_reuse")?,
            freeze_lm_head: self.typed("finetune.freeze_lm_head")?,
            grad_clip: self.clip("finetune.grad_clip")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn lr_grid(&self) -> Result<Vec<f64>, ConfigError> {
        self.list("finetune.lr_grid")
    }

    pub fn batch_grid(&self) -> Result<Vec<usize>, ConfigError> {
        self.list("finetune.batch_grid")
    }

    /// Checks every typed view parses.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.placeholder()?;
        self.backbone()?;
        self.corpus()?;
        self.heldout_sentences()?;
        self.generator()?;
        self.pretrain()?;
        self.synth_task()?;
        self.finetune()?;
        self.lr_grid()?;
        self.batch_grid()?;
        Ok(())
    }

    /// Canonical text form: every key in declaration order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let _ = writeln!(out, "{k} = {}", self.values[*k]);
        }
        out
    }

    /// sha256 of [`RunConfig::render`].
    pub fn hash(&self) -> String {
        crate::checkpoint::hash_text(&self.render())
    }
}
