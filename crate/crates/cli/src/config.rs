use std::path::{Path, PathBuf};

use relcap::backbone::{EncoderConfig, WorldConfig};
use relcap::fusion::FusionConfig;
use relcap::numerics::bundle::read_json;
use relcap::training::TrainConfig;
use relcap::weaksup::SampleMode;
use relcap::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything an experiment depends on. Command-line flags override fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Single source of randomness; copied into the world, encoder and training seeds.
    pub seed: u64,
    pub world: WorldConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub captions: CaptionConfig,
    pub ablation: Ablation,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    pub mode: SampleMode,
    /// Draw training captions from several templates per change kind.
    pub paraphrases: bool,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            mode: SampleMode::Swap,
            paraphrases: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub scramble: bool,
    pub mismatch: bool,
    pub image_only: bool,
    pub text_only: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.scramble && self.mismatch {
            return Err(Error::Config("scramble and mismatch ablations cannot be combined".into()));
        }
        if self.image_only && self.text_only {
            return Err(Error::Config("image_only and text_only ablations cannot be combined".into()));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        [
            (self.scramble, "scramble"),
            (self.mismatch, "mismatch"),
            (self.image_only, "image_only"),
            (self.text_only, "text_only"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub synth: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub texts: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub judgments: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scores: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Config(format!("config file {} does not exist", path.display())));
        }
        read_json(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the seed override, propagates the seed and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.world.seed = self.seed;
        self.encoder.seed = self.seed;
        self.train.seed = self.seed;
        if self.world.concept_dim != self.encoder.concept_dim {
            return Err(Error::Config(format!(
                "world concept_dim {} differs from encoder concept_dim {}",
                self.world.concept_dim, self.encoder.concept_dim
            )));
        }
        self.train.validate()?;
        self.ablation.validate()?;
        Ok(self)
    }
}

/// `flag` if given, else `config`, else a configuration error naming both.
pub fn require(flag: &Option<PathBuf>, config: &Option<PathBuf>, name: &str, why: &str) -> Result<PathBuf> {
    flag.clone().or_else(|| config.clone()).ok_or_else(|| {
        Error::Config(format!("{why} needs --{name} (or paths.{} in the config)", name.replace('-', "_")))
    })
}

/// Errors unless `path` exists, naming the flag it came from.
pub fn existing(path: PathBuf, name: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Config(format!("--{name}: {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "world": {"items": 32}, "fusion": {"mode": "va"}}"#).unwrap();
        let c = c.resolve(None).unwrap();
        assert_eq!(c.world.items, 32);
        assert_eq!(c.world.groups, 8);
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.fusion.alpha, 0.01);
    }

    #[test]
    fn unknown_fields_and_bad_combinations_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 1}"#).is_err());
        let c = ExperimentConfig {
            ablation: Ablation {
                scramble: true,
                mismatch: true,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(c.resolve(None), Err(Error::Config(_))));
    }
}
