use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{min_disc_input, BackboneConfig, ModelConfig, ParamGroup};
use crate::optim::AdamConfig;

/// Switches for the structural ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub use_perceptual: bool,
    pub use_tv: bool,
    pub use_paired_disc: bool,
    /// Off: supervised-only training, no real data needed.
    pub use_unsupervised: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_perceptual: true,
            use_tv: true,
            use_paired_disc: true,
            use_unsupervised: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_super: f64,
    pub lr_unsup: f64,
    /// Learning rate of the shared mask learner; `lr_super` when unset.
    pub ssrml_lr: Option<f64>,
    pub decay_start_epoch: usize,
    pub patch: usize,
    pub stride: usize,
    pub seed: u64,
    /// Discriminator phases per generator phase.
    pub disc_updates_per_step: usize,
    /// Checkpoint and sample-dump period in epochs.
    pub checkpoint_every: usize,
    pub precision: Precision,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub ablations: Ablations,
    pub perceptual: BackboneConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_super: 1e-4,
            lr_unsup: 1e-3,
            ssrml_lr: None,
            decay_start_epoch: 100,
            patch: 100,
            stride: 80,
            seed: 0,
            disc_updates_per_step: 1,
            checkpoint_every: 10,
            precision: Precision::F32,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            ablations: Ablations::default(),
            perceptual: BackboneConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.decay_start_epoch == 0 || self.decay_start_epoch > self.epochs {
            return bad(format!(
                "decay_start_epoch must satisfy 0 < decay_start_epoch <= epochs ({}), got {}",
                self.epochs, self.decay_start_epoch
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [
            ("lr_super", Some(self.lr_super)),
            ("lr_unsup", Some(self.lr_unsup)),
            ("ssrml_lr", self.ssrml_lr),
        ] {
            if let Some(lr) = lr {
                if !(lr.is_finite() && lr > 0.0) {
                    return bad(format!("{name} must be positive, got {lr}"));
                }
            }
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.disc_updates_per_step == 0 {
            return bad("disc_updates_per_step must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        self.model.validate()?;
        let min = min_disc_input(self.model.disc_scales, self.model.disc_layers_per_scale);
        if self.patch < min {
            return bad(format!(
                "patch {} is below the discriminator minimum {min} for {} scales",
                self.patch, self.model.disc_scales
            ));
        }
        self.weights.validate()?;
        self.adam.validate()
    }

    /// Base learning rate of a parameter group before scheduling.
    pub fn base_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Ssrml => self.ssrml_lr.unwrap_or(self.lr_super),
            ParamGroup::GenSynthetic | ParamGroup::DiscSynthetic | ParamGroup::DiscPaired => self.lr_super,
            ParamGroup::GenReal | ParamGroup::Reconstructor | ParamGroup::DiscReal => self.lr_unsup,
        }
    }
}

/// Constant until `decay_start_epoch`, then linear to zero at `epochs`.
pub fn lr_schedule(epoch: usize, base_lr: f64, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start_epoch {
        return base_lr;
    }
    if epoch >= cfg.epochs {
        return 0.0;
    }
    base_lr * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start_epoch) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_plateau_midpoint_and_end() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(50, 1e-4, &cfg), 1e-4);
        assert_eq!(lr_schedule(99, 1e-4, &cfg), 1e-4);
        assert_eq!(lr_schedule(100, 1e-4, &cfg), 1e-4);
        assert!((lr_schedule(150, 1e-4, &cfg) - 0.5e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(200, 1e-4, &cfg), 0.0);
    }

    #[test]
    fn defaults_validate_and_map_groups() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.base_lr(ParamGroup::Ssrml), 1e-4);
        assert_eq!(cfg.base_lr(ParamGroup::Reconstructor), 1e-3);
        let cfg = TrainConfig {
            ssrml_lr: Some(5e-4),
            ..cfg
        };
        assert_eq!(cfg.base_lr(ParamGroup::Ssrml), 5e-4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = TrainConfig::default();
        for cfg in [
            TrainConfig {
                decay_start_epoch: 0,
                ..base.clone()
            },
            TrainConfig {
                decay_start_epoch: 300,
                ..base.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..base.clone()
            },
            TrainConfig {
                lr_unsup: 0.0,
                ..base.clone()
            },
            TrainConfig {
                patch: 32,
                ..base.clone()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let cfg: TrainConfig = serde_json::from_str(r#"{"ablations": {"use_tv": false}}"#).unwrap();
        assert!(!cfg.ablations.use_tv && cfg.ablations.use_perceptual);
    }
}
