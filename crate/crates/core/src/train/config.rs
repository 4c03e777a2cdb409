use serde::{Deserialize, Serialize};

use super::data::IGNORE_INDEX;
use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;

/// Optimizer, schedule and augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Exponent of the poly decay.
    pub power: f64,
    pub max_iters: u64,
    pub batch_size: usize,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Crop `(height, width)`; both multiples of 32.
    pub crop: (usize, usize),
    /// Bounds of the uniform random rescale factor.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
    pub ignore_index: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 6e-5,
            power: 0.9,
            max_iters: 1000,
            batch_size: 2,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            crop: (512, 512),
            scale_range: (0.5, 2.0),
            flip_prob: 0.5,
            seed: 0,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    field,
                    format!("must be finite and non-negative, got {v}"),
                ))
            }
        };
        finite_nonneg("base_lr", self.base_lr)?;
        finite_nonneg("power", self.power)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        finite_nonneg("eps", self.eps)?;
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (i, b) in [self.betas.0, self.betas.1].into_iter().enumerate() {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(
                    format!("betas.{i}"),
                    format!("must lie in [0, 1), got {b}"),
                ));
            }
        }
        for (i, c) in [self.crop.0, self.crop.1].into_iter().enumerate() {
            if c == 0 || c % INPUT_MULTIPLE != 0 {
                return Err(Error::config(
                    format!("crop.{i}"),
                    format!("must be a positive multiple of {INPUT_MULTIPLE}, got {c}"),
                ));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
            return Err(Error::config(
                "scale_range",
                format!("need 0 < lo <= hi, got ({lo}, {hi})"),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(
                "flip_prob",
                format!("must lie in [0, 1], got {}", self.flip_prob),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(cfg: TrainConfig) -> String {
        match cfg.validate() {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn default_is_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_fields_are_named() {
        let d = TrainConfig::default;
        assert_eq!(
            field_of(TrainConfig {
                crop: (512, 500),
                ..d()
            }),
            "crop.1"
        );
        assert_eq!(
            field_of(TrainConfig {
                scale_range: (0.0, 1.0),
                ..d()
            }),
            "scale_range"
        );
        assert_eq!(
            field_of(TrainConfig {
                scale_range: (2.0, 1.0),
                ..d()
            }),
            "scale_range"
        );
        assert_eq!(field_of(TrainConfig { flip_prob: 1.5, ..d() }), "flip_prob");
        assert_eq!(
            field_of(TrainConfig {
                betas: (0.9, 1.0),
                ..d()
            }),
            "betas.1"
        );
        assert_eq!(field_of(TrainConfig { batch_size: 0, ..d() }), "batch_size");
        assert_eq!(
            field_of(TrainConfig {
                base_lr: f64::NAN,
                ..d()
            }),
            "base_lr"
        );
    }
}
