//! Run configuration files: `model.*`, `train.*` and `embedder.*` keys in
//! one `key = value` file. Unknown keys are errors.

use std::path::Path;

use crate::config::KeyValues;
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embedder: EmbedderSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.model.apply_kv(&mut kv)?;
        cfg.train.apply_kv(&mut kv)?;
        cfg.embedder.apply_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text, source)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(KeyValues::load(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.embedder.validate()?;
        if (self.model.embed_tokens, self.model.embed_dim) != (self.embedder.tokens, self.embedder.dim) {
            return Err(Error::Config(format!(
                "model expects {}×{} context tokens but the embedder produces {}×{}",
                self.model.embed_tokens, self.model.embed_dim, self.embedder.tokens, self.embedder.dim
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new("run");
        self.model.to_kv(&mut kv);
        self.train.to_kv(&mut kv);
        self.embedder.to_kv(&mut kv);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = cfg.to_kv().to_text();
        assert_eq!(RunConfig::parse(&text, "t").unwrap(), cfg);
        let err = RunConfig::parse("train.epochs = 5\ntrain.epoch = 4\n", "t").unwrap_err().to_string();
        assert!(err.contains("train.epoch"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::parse("train.epochs = 6\n# comment\nmodel.seed = 3\n", "t").unwrap();
        assert_eq!(cfg.train.epochs, 6);
        assert_eq!(cfg.model.seed, 3);
        assert_eq!(cfg.embedder, EmbedderSpec::default());
    }

    #[test]
    fn embedder_and_model_must_agree() {
        assert!(RunConfig::parse("model.embed_dim = 16\n", "t").is_err());
        assert!(RunConfig::parse("train.warmup_epochs = 40\n", "t").is_err());
    }

    #[test]
    fn shipped_toy_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf");
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
