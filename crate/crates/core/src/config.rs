//! Serializable run configuration: network architecture and training
//! hyperparameters. Every command echoes its effective config so a run
//! can be reproduced from its output directory alone.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::bev::GridMeta;
use crate::error::{Error, Result};

/// Network topology parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 encoder stage; the stem shares the
    /// first entry.
    pub widths: Vec<usize>,
    /// Number of stride-2 encoder (and decoder) stages.
    pub depth: usize,
    pub rotation_bins: usize,
    /// Spike-count cap per inference window.
    pub window_max: u32,
    pub stem_kernel: usize,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            depth: 3,
            rotation_bins: 8,
            window_max: 63,
            stem_kernel: 3,
            enc_kernel: 3,
            dec_kernel: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1".to_string()));
        }
        if self.widths.len() != self.depth {
            return Err(Error::config(format!(
                "widths has {} entries for depth {}",
                self.widths.len(),
                self.depth
            )));
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_channels == 0 {
            return Err(Error::config("channel widths must be positive".to_string()));
        }
        if self.rotation_bins < 2 {
            return Err(Error::config("rotation_bins must be >= 2".to_string()));
        }
        if self.window_max < 1 {
            return Err(Error::config("window_max must be >= 1".to_string()));
        }
        if self.stem_kernel % 2 == 0 || self.enc_kernel % 2 == 0 {
            return Err(Error::config(
                "stem/encoder kernels must be odd for symmetric padding".to_string(),
            ));
        }
        if self.dec_kernel != 2 {
            return Err(Error::config(
                "decoder kernel must be 2 (stride-2 doubling)".to_string(),
            ));
        }
        Ok(())
    }
}

/// Loss mixing weights and focal-loss shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_kp: f64,
    pub w_box: f64,
    pub w_rot: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_kp: 1.0,
            w_box: 1.0,
            w_rot: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_kp < 0.0 || self.w_box < 0.0 || self.w_rot < 0.0 {
            return Err(Error::config("loss weights must be non-negative".to_string()));
        }
        if self.w_kp + self.w_box + self.w_rot <= 0.0 {
            return Err(Error::config("at least one loss weight must be positive".to_string()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::config("focal_gamma must be >= 0".to_string()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::config("focal_alpha must lie in (0, 1)".to_string()));
        }
        Ok(())
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub seed: u64,
    /// Directory holding a synthetic dataset manifest.
    pub train_dir: Option<PathBuf>,
    /// Held-out dataset; when absent a deterministic tail split of the
    /// training set is used instead.
    pub val_dir: Option<PathBuf>,
    /// Fraction of the training set held out when `val_dir` is unset.
    pub val_split: f64,
    /// Checkpoint every this many epochs.
    pub checkpoint_interval: usize,
    pub arch: ArchConfig,
    pub meta: GridMeta,
    /// Foreground-margin for keypoint decoding during validation.
    pub min_margin: i64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            epochs: 30,
            batch_size: 8,
            loss: LossWeights::default(),
            seed: 42,
            train_dir: None,
            val_dir: None,
            val_split: 0.2,
            checkpoint_interval: 5,
            arch: ArchConfig::default(),
            meta: GridMeta::desk_scale(),
            min_margin: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        self.meta.validate()?;
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr must be >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)".to_string()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.val_split) {
            return Err(Error::config("val_split must lie in [0, 1)".to_string()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ArchConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn mismatched_widths_rejected() {
        let cfg = ArchConfig { widths: vec![16, 32], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"lr": 0.01, "epochs": 5}"#).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
        cfg.validate().unwrap();
    }

    #[test]
    fn zero_loss_weights_rejected() {
        let lw = LossWeights { w_kp: 0.0, w_box: 0.0, w_rot: 0.0, ..Default::default() };
        assert!(lw.validate().is_err());
    }
}
