//! Run configuration: a TOML file whose tables override a named preset.
//!
//! ```toml
//! preset = "desk"          # micro | desk | full
//! seed = 0
//!
//! [model.field]
//! width = 48               # any model key; unspecified keys keep the preset
//!
//! [train]
//! epochs = 50
//! ```
//!
//! Unknown keys anywhere are rejected. Changing `model.volume` re-derives the
//! preset's trajectory for the new dims before the `model.trajectory` table
//! is applied.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::geometry::TrajectoryConfig;
use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::volume::PreprocessOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Micro,
    Desk,
    Full,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Micro => "micro",
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Micro => ModelConfig::micro(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Full => ModelConfig::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Normalize loaded volumes to `[0, 255]`; phantoms already are.
    pub preprocess: bool,
    pub preprocess_options: PreprocessOptions,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            preprocess: false,
            preprocess_options: PreprocessOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Attenuation per unit density and length; 0 selects
    /// 4 / mean focal path length.
    pub mu_scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { mu_scale: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub render: RenderConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        RunConfig {
            preset,
            seed: 0,
            model: preset.model(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            render: RenderConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut user: Table = text.parse().map_err(config_err)?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(v) => Preset::deserialize(v.clone()).map_err(config_err)?,
        };
        let mut base = RunConfig::preset(preset);
        let volume = user
            .get("model")
            .and_then(|m| m.get("volume"))
            .map(|v| <[usize; 4]>::deserialize(v.clone()).map_err(config_err))
            .transpose()?;
        if let Some(v) = volume {
            let image = [v[1], base.model.trajectory.image[1] * v[2] / base.model.volume[2].max(1)];
            let samples = base.model.trajectory.samples;
            base.model.trajectory = TrajectoryConfig::for_volume([v[1], v[2], v[3]], image);
            base.model.trajectory.samples = samples;
        }
        let mut tree = Table::try_from(&base).map_err(config_err)?;
        // the seed also seeds training unless train.seed is given
        if let Some(seed) = user.get("seed").cloned() {
            let has_train_seed = user.get("train").and_then(|t| t.get("seed")).is_some();
            if !has_train_seed {
                if let Some(Value::Table(t)) = tree.get_mut("train") {
                    t.insert("seed".into(), seed);
                }
            }
        }
        merge(&mut tree, std::mem::take(&mut user));
        let cfg: RunConfig = tree.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.render.mu_scale >= 0.0 && self.render.mu_scale.is_finite()) {
            return Err(Error::Config(format!("render.mu_scale must be >= 0, got {}", self.render.mu_scale)));
        }
        Ok(())
    }

    /// Fully resolved TOML; loading it back yields the same config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    /// SHA-256 of the resolved TOML.
    pub fn digest(&self) -> Result<String> {
        Ok(hex_digest(self.to_toml()?.as_bytes()))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_desk_preset() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::preset(Preset::Desk));
    }

    #[test]
    fn partial_tables_override_the_preset() {
        let cfg = RunConfig::from_toml("preset = \"micro\"\nseed = 9\n[model.field]\nwidth = 12\n[train]\nepochs = 4\n").unwrap();
        assert_eq!(cfg.model.field.width, 12);
        assert_eq!(cfg.model.field.depth, ModelConfig::micro().field.depth);
        assert_eq!(cfg.model.hash, ModelConfig::micro().hash);
        assert_eq!((cfg.train.epochs, cfg.train.seed), (4, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[model.field]\nwidht = 3", "[train.adam]\nlr = 1e-3\nmomentum = 0.9"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn resolved_toml_round_trips() {
        let cfg = RunConfig::from_toml("preset = \"full\"\n[model.extractor]\ndecoder_fusion = \"additive\"").unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest().unwrap(), again.digest().unwrap());
    }

    #[test]
    fn volume_override_rederives_trajectory() {
        let cfg = RunConfig::from_toml("[model]\nvolume = [1, 16, 32, 32]\n[model.extractor]\npatch = 8\n[model.unet]\nchannels = [4, 8]").unwrap();
        assert_eq!(cfg.model.trajectory.image, [16, 32]);
        assert_eq!(cfg.model.trajectory.z_range, [0.0, 15.0]);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let err = RunConfig::from_toml("[model]\nvolume = [1, 30, 64, 64]").unwrap_err();
        assert_eq!(err.exit_code(), 2, "{err}");
        assert!(RunConfig::from_toml("[train]\nepochs = 0").is_err());
    }
}
