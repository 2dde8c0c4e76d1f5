use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// HR patch edge used for each scale factor when none is configured.
pub fn default_patch_size(scale: usize) -> usize {
    match scale {
        2 => 60,
        3 => 69,
        4 => 72,
        s => 24 * s,
    }
}

/// Optimizer, schedule, and data settings for one training run.
///
/// Stored as a flat `key = value` text file; missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: usize,
    /// HR patch edge in pixels; 0 picks the default for the scale.
    pub patch_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub lr_start: f64,
    pub lr_floor: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Learning-rate factor for the last layer of each subnetwork.
    pub final_layer_lr_mult: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Add 90/180/270 degree rotations of every training image.
    pub rotations: bool,
    /// Keep the down-sampler fixed and train the up-sampler only.
    pub freeze_down: bool,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Scale 3 with the patch size left to follow the scale.
    fn default() -> Self {
        TrainConfig {
            patch_size: 0,
            ..TrainConfig::for_scale(3)
        }
    }
}

impl TrainConfig {
    pub fn for_scale(scale: usize) -> Self {
        TrainConfig {
            scale,
            patch_size: default_patch_size(scale),
            batch_size: 16,
            epochs: 300,
            max_steps: 0,
            lr_start: 1e-3,
            lr_floor: 1e-5,
            lr_decay: 0.5,
            decay_every: 50,
            final_layer_lr_mult: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rotations: true,
            freeze_down: false,
            seed: 0,
            checkpoint_every: 10,
        }
    }

    pub fn patch(&self) -> usize {
        if self.patch_size == 0 {
            default_patch_size(self.scale)
        } else {
            self.patch_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale must be 2, 3 or 4, got {}", self.scale));
        }
        if !self.patch().is_multiple_of(self.scale) {
            return bad(format!("patch size {} is not divisible by scale {}", self.patch(), self.scale));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_start && self.lr_start.is_finite()) {
            return bad(format!(
                "need 0 < lr_floor <= lr_start (got {} and {})",
                self.lr_floor, self.lr_start
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1".into());
        }
        if !(self.final_layer_lr_mult >= 0.0 && self.final_layer_lr_mult.is_finite()) {
            return bad(format!("final_layer_lr_mult must be >= 0, got {}", self.final_layer_lr_mult));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Malformed {
            format: "train config",
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        TrainConfig::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// `max(lr_floor, lr_start * lr_decay^floor(epoch / decay_every))`
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    (cfg.lr_start * cfg.lr_decay.powi(k)).max(cfg.lr_floor)
}
