use super::{LabError, SynthTaskConfig, TrainConfig};
use crate::config::{parse_assignments, render, value, ConfigError};
use crate::model::ModelConfig;
use crate::streams::VocabSizes;

/// Everything one lab run depends on: `seed`, `model.*`, `task.*` and
/// `train.*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub task: SynthTaskConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// The small reference recipe used by the lab and its ablations.
    fn default() -> Self {
        let model = ModelConfig {
            d: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            vocab: VocabSizes::uniform(64),
            ..ModelConfig::default()
        };
        let mut run = RunConfig {
            seed: 0,
            model,
            task: SynthTaskConfig::default(),
            train: TrainConfig::default(),
        };
        run.sync();
        run
    }
}

impl RunConfig {
    /// Copies the shared fields (seed, vocabularies, rates) into the task.
    fn sync(&mut self) {
        self.task.seed = self.seed;
        self.task.vocab = self.model.vocab;
        self.task.rate_text = self.model.rate_text;
        self.task.rate_speech = self.model.rate_speech;
        self.task.rate_face = self.model.rate_face;
        self.task.rate_body = self.model.rate_body;
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        if key == "seed" {
            self.seed = value(key, v)?;
        } else if let Some(k) = key.strip_prefix("model.") {
            self.model
                .set(k, v)
                .map_err(|e| prefix_error(e, "model."))?;
        } else if let Some(k) = key.strip_prefix("task.") {
            let t = &mut self.task;
            match k {
                "rule_seed" => t.rule_seed = value(key, v)?,
                "n_sequences" => t.n_sequences = value(key, v)?,
                "seconds" => t.seconds = value(key, v)?,
                "text" => t.text = value(key, v)?,
                "lag" => t.lag = value(key, v)?,
                "follow" => t.follow = value(key, v)?,
                "distractor_rate" => t.distractor_rate = value(key, v)?,
                "jitter" => t.jitter = value(key, v)?,
                "identity_rules" => t.identity_rules = value(key, v)?,
                _ => return Err(ConfigError::UnknownKey(key.to_string())),
            }
        } else if let Some(k) = key.strip_prefix("train.") {
            self.train.set(k, v).map_err(|e| prefix_error(e, "train."))?;
        } else {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.sync();
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.task;
        let mut e = vec![("seed".to_string(), self.seed.to_string())];
        e.extend(
            self.model
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("model.{k}"), v)),
        );
        for (k, v) in [
            ("rule_seed", t.rule_seed.to_string()),
            ("n_sequences", t.n_sequences.to_string()),
            ("seconds", t.seconds.to_string()),
            ("text", t.text.to_string()),
            ("lag", t.lag.to_string()),
            ("follow", t.follow.to_string()),
            ("distractor_rate", t.distractor_rate.to_string()),
            ("jitter", t.jitter.to_string()),
            ("identity_rules", t.identity_rules.to_string()),
        ] {
            e.push((format!("task.{k}"), v));
        }
        e.extend(
            self.train
                .entries()
                .into_iter()
                .map(|(k, v)| (format!("train.{k}"), v)),
        );
        e
    }

    /// Canonical key-sorted text; parsing it reproduces the run exactly.
    pub fn to_text(&self) -> String {
        render(self.entries())
    }

    /// Applies the assignments of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_assignments(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, LabError> {
        let mut run = RunConfig::default();
        run.apply_text(text)?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Task of the held-out split: same rules, disjoint sequences.
    pub fn eval_task(&self) -> SynthTaskConfig {
        SynthTaskConfig {
            n_sequences: self.train.n_eval,
            stream_offset: 1 << 32,
            ..self.task.clone()
        }
    }
}

fn prefix_error(e: ConfigError, prefix: &str) -> ConfigError {
    match e {
        ConfigError::UnknownKey(k) => ConfigError::UnknownKey(format!("{prefix}{k}")),
        ConfigError::BadValue {
            key,
            value,
            message,
        } => ConfigError::BadValue {
            key: format!("{prefix}{key}"),
            value,
            message,
        },
        ConfigError::Invalid { key, message } => ConfigError::Invalid {
            key: format!("{prefix}{key}"),
            message,
        },
        other => other,
    }
}
