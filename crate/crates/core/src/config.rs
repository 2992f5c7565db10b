//! JSON run configuration shared by the CLI commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{fingerprint, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Existing dataset manifest; when absent, `train` renders the dataset
    /// described by `data` in memory.
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces both `data.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenParams,
    pub paths: PathsConfig,
}

fn at(path: &str, e: Error) -> Error {
    let message = match e {
        Error::InvalidConfig(m) => m,
        other => other.to_string(),
    };
    Error::Config {
        path: path.to_string(),
        message,
    }
}

impl RunConfig {
    /// Parses, applies the top-level seed and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { String::new() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.data.seed = seed;
            self.train.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((field, message)) = self.train.check() {
            return Err(Error::Config {
                path: format!("train.{field}"),
                message,
            });
        }
        self.model.validate().map_err(|e| at("model", e))?;
        self.data.validate().map_err(|e| at("data", e))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the whole config.
    pub fn fingerprint(&self) -> [u8; 32] {
        fingerprint(self)
    }
}

/// Fingerprint stored in checkpoints: model and training settings only.
pub fn training_fingerprint(model: &ModelConfig, train: &TrainConfig) -> [u8; 32] {
    fingerprint(&serde_json::json!({ "model": model, "train": train }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn validation_reports_key_path() {
        match RunConfig::parse(r#"{"train":{"lr0":-1}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.lr0"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse(r#"{"train":{"lr0":"fast"}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.lr0"),
            other => panic!("{other:?}"),
        }
        match RunConfig::parse(r#"{"model":{"bogus":1}}"#) {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "model.bogus");
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
        match RunConfig::parse(r#"{"model":{"input_size":48}}"#) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fingerprint_is_order_independent() {
        let a = RunConfig::parse(r#"{"train":{"epochs":5,"lr0":0.001},"data":{"n":20}}"#).unwrap();
        let b = RunConfig::parse(r#"{"data":{"n":20},"train":{"lr0":0.001,"epochs":5}}"#).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = RunConfig::parse(r#"{"data":{"n":21}}"#).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn top_level_seed_propagates() {
        let c = RunConfig::parse(r#"{"seed":9}"#).unwrap();
        assert_eq!((c.data.seed, c.train.seed), (9, 9));
    }
}
