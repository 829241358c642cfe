//! Run configuration files (TOML). Every section is optional and unknown
//! keys are rejected.
//!
//! ```toml
//! [synth]
//! n_identities = 50
//! noise_sigma = 0.05
//!
//! [train]
//! epochs = 100
//! learning_rate = 0.01
//!
//! [model]
//! part_count = 4
//! rounds = 2
//!
//! [pipeline]
//! walk_steps = 1
//! scorer = { kind = "cosine" }
//! flags = { rw = true, gm = true, cl = true }
//!
//! [paths]
//! features = "data/groups.tsv"
//! checkpoint = "runs/model.ckpt"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::SynthConfig;
use crate::matching::MatchConfig;
use crate::pipeline::PipelineConfig;
use crate::training::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "GROUPWALK_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{}: not found", .0.display())]
    NotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub model: MatchConfig,
    pub pipeline: PipelineConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound(path.to_path_buf()),
            _ => ConfigError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        Self::parse(&text, path)
    }

    /// Loads `explicit` if given, else the file named by [`CONFIG_ENV`], else
    /// the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random_walk::ScorerConfig;

    #[test]
    fn sections_are_optional() {
        let c = RunConfig::parse("", Path::new("x")).unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn reads_nested_sections() {
        let c = RunConfig::parse(
            "[train]\nepochs = 3\n[pipeline]\nscorer = { kind = \"bilinear\" }\nflags = { rw = false }\n[synth]\nmembers_per_group = [2, 4]\n",
            Path::new("x"),
        )
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.pipeline.scorer, ScorerConfig::Bilinear { matrix: None });
        assert!(!c.pipeline.flags.rw && c.pipeline.flags.gm);
        assert_eq!(c.synth.members_per_group, [2, 4]);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[train]\nepoch = 3\n", Path::new("run.toml")).unwrap_err();
        assert!(err.to_string().contains("epoch"), "{err}");
    }
}
