use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgmask::MaskParams;
use crate::frameio::{IrMapping, Modality};
use crate::io;
use crate::losses::{Loss, LossKind, WMSE_FACTOR};
use crate::models::{ModelKind, CLIP_LEN};

/// Everything that determines a training/evaluation run. Units are part of
/// the key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub loss: LossKind,
    #[serde(default = "default_modality")]
    pub modality: Modality,
    #[serde(default = "default_max_depth")]
    pub max_depth_m: f64,
    #[serde(default)]
    pub ir_mapping: IrMapping,
    /// Std of the Gaussian input noise, normalized units.
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_clip")]
    pub clip_length_frames: usize,
    #[serde(default = "default_window")]
    pub smoothing_window_frames: usize,
    #[serde(default = "default_factor")]
    pub wmse_weight_factor: f64,
    #[serde(default)]
    pub mask: MaskParams,
    #[serde(default)]
    pub data: DataPaths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub category_map: Option<PathBuf>,
    pub mask_cache_dir: Option<PathBuf>,
}

fn default_modality() -> Modality {
    Modality::Depth
}
fn default_max_depth() -> f64 {
    3.5
}
fn default_noise() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_clip() -> usize {
    CLIP_LEN
}
fn default_window() -> usize {
    10
}
fn default_factor() -> f64 {
    WMSE_FACTOR
}

impl RunConfig {
    /// Defaults for everything but the network and loss.
    pub fn new(model: ModelKind, loss: LossKind) -> Self {
        RunConfig {
            model,
            loss,
            modality: default_modality(),
            max_depth_m: default_max_depth(),
            ir_mapping: IrMapping::default(),
            noise_sigma: default_noise(),
            seed: 0,
            epochs: default_epochs(),
            learning_rate: default_lr(),
            clip_length_frames: default_clip(),
            smoothing_window_frames: default_window(),
            wmse_weight_factor: default_factor(),
            mask: MaskParams::default(),
            data: DataPaths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.smoothing_window_frames < 1 {
            return bad("smoothing_window_frames must be >= 1".into());
        }
        if self.clip_length_frames < 1 {
            return bad("clip_length_frames must be >= 1".into());
        }
        if !(self.max_depth_m > 0.0 && self.max_depth_m.is_finite()) {
            return bad(format!("max_depth_m must be positive, got {}", self.max_depth_m));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.wmse_weight_factor >= 0.0 && self.wmse_weight_factor.is_finite()) {
            return bad(format!("wmse_weight_factor must be >= 0, got {}", self.wmse_weight_factor));
        }
        self.mask.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_fn(&self) -> Loss {
        Loss {
            kind: self.loss,
            weight_factor: self.wmse_weight_factor,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::from_toml(&io::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            cfg.data.resolve_against(base);
        }
        Ok(cfg)
    }
}

impl DataPaths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.train_dir,
            &mut self.test_dir,
            &mut self.annotations,
            &mut self.category_map,
            &mut self.mask_cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = RunConfig::from_toml("model = \"pcae\"\nloss = \"wmse\"\n").unwrap();
        assert_eq!(cfg, RunConfig::new(ModelKind::Pcae, LossKind::Wmse));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.mask.t_w_frames, 300);
        assert_eq!(cfg.smoothing_window_frames, 10);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("model = \"rcae\"\nloss = \"mse\"\nepochs = 0\n").is_err());
        assert!(RunConfig::from_toml("model = \"rcae\"\nloss = \"mse\"\nmax_depth = 3\n").is_err());
        assert!(RunConfig::from_toml("model = \"rcae\"\nloss = \"mse\"\n[mask]\nalpha = 2.0\n").is_err());
        assert!(RunConfig::from_toml("model = \"cnn\"\nloss = \"mse\"\n").is_err());
    }
}
