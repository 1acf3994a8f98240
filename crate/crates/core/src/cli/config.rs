use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::gz2::{AugmentationConfig, PreprocessConfig};
use crate::nn::HeadMode;
use crate::train::{EarlyStop, PlateauSchedule};

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub catalog: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub validation_fraction: Option<f64>,
    /// Turns augmentation on or off; the parameters live in `[augmentation]`.
    pub augment: Option<bool>,
    pub workers: Option<usize>,
    pub prefetch: Option<usize>,
    pub plateau: Option<PlateauSchedule>,
    pub early_stop: Option<EarlyStop>,
}

/// Compound-scaling override: the `base` architecture scaled by the given
/// coefficients replaces the preset.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingOverrides {
    pub base: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub phi: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurationOverrides {
    pub rules: Option<PathBuf>,
    pub class6_any: Option<bool>,
    /// File name for a galaxy id, `{id}` is replaced.
    pub image_pattern: Option<String>,
}

/// Settings file shared by all commands. Command-line flags take
/// precedence over every value here.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preset: Option<String>,
    pub mode: Option<HeadMode>,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub training: TrainingOverrides,
    pub augmentation: Option<AugmentationConfig>,
    pub preprocess: Option<PreprocessConfig>,
    #[serde(default)]
    pub scaling: ScalingOverrides,
    #[serde(default)]
    pub curation: CurationOverrides,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a settings file. Relative paths inside it are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.catalog);
        fix(&mut cfg.paths.image_dir);
        fix(&mut cfg.paths.manifest);
        fix(&mut cfg.paths.checkpoint_dir);
        fix(&mut cfg.curation.rules);
        Ok(cfg)
    }
}
