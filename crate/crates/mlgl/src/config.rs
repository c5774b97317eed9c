//! Run configuration: one TOML file with a section per concern.

use std::path::{Path, PathBuf};

use mlgl_core::train::TrainingConfig;
use mlgl_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::analysis::NodeScalar;
use crate::data::{Aggregation, Part};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Per-clip (or per-rater) label CSV.
    pub labels: Option<PathBuf>,
    /// Directory holding `<clip_id>.wav`.
    pub audio_dir: Option<PathBuf>,
    /// Taxonomy TOML; the built-in one when absent.
    pub taxonomy: Option<PathBuf>,
    /// Split file; a seeded split when absent or missing.
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            labels: None,
            audio_dir: None,
            taxonomy: None,
            split: None,
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub scalar: NodeScalar,
    /// Split the analyses run on.
    pub split: Part,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            scalar: NodeScalar::Head,
            split: Part::Test,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The single source of randomness: model init, split, shuffling,
    /// dropout and synthetic data. Overrides `training.seed` and
    /// `synth.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub aggregation: Aggregation,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub analysis: AnalysisConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            paths: Paths::default(),
            aggregation: Aggregation::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            analysis: AnalysisConfig::default(),
            synth: SynthConfig::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.features.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "features.n_mels = {} but model.n_mels = {}",
                self.features.n_mels, self.model.n_mels
            )));
        }
        if self.analysis.batch_size == 0 {
            return Err(Error::Config("analysis.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 3\n").is_err());
        assert!(RunConfig::parse("[model]\nchanels = [1, 2, 3]\n").is_err());
        assert!(RunConfig::parse("[training.optimizer]\nlearning_rate = 0.1\n").is_err());
    }

    #[test]
    fn seed_flows_everywhere() {
        let cfg = RunConfig::parse("seed = 11\n[training]\nepochs = 3\n").unwrap();
        assert_eq!((cfg.training.seed, cfg.synth.seed, cfg.training.epochs), (11, 11, 3));
    }

    #[test]
    fn mel_mismatch_rejected() {
        assert!(RunConfig::parse("[features]\nn_mels = 32\n").is_err());
    }
}
