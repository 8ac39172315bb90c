use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ple::Augmentation;

/// Every scalar the training procedure depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperConfig {
    /// Step size of the virtual inner step and of the real SGD updates.
    pub alpha: f64,
    /// SGD step size of the supervised baseline phase.
    pub baseline_lr: f64,
    /// Meta step size on the weight maps. Cancelled by normalization.
    pub beta: f64,
    /// Guard added to the normalization denominator.
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Clean (meta) batch size.
    pub batch_clean: usize,
    /// Batch size over the initialized-label set.
    pub batch_noisy: usize,
    /// Batch size of the supervised baseline phase.
    pub batch_baseline: usize,
    pub lambda_aug: f64,
    pub lambda_st: f64,
    /// Augmentations used for label enhancement; `Q` is their count.
    pub ple: Vec<Augmentation>,
    /// Teacher input noise scale, mean, and standard deviation.
    pub gamma: f64,
    pub mu: f64,
    pub sigma: f64,
    pub ema_decay: f64,
    pub epochs_baseline: usize,
    pub epochs_mlb: usize,
    /// Channel width `F` of the segmentation network.
    pub width: usize,
    pub seed: u64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            alpha: 0.005,
            baseline_lr: 0.005,
            beta: 1.0,
            eps: 1e-12,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_clean: 4,
            batch_noisy: 4,
            batch_baseline: 4,
            lambda_aug: 1.0,
            lambda_st: 1.0,
            ple: Vec::new(),
            gamma: 0.1,
            mu: 0.0,
            sigma: 1.0,
            ema_decay: 0.99,
            epochs_baseline: 30,
            epochs_mlb: 100,
            width: 8,
            seed: 0,
        }
    }
}

impl HyperConfig {
    pub fn q(&self) -> usize {
        self.ple.len()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("baseline_lr", self.baseline_lr),
            ("beta", self.beta),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lambda_aug", self.lambda_aug),
            ("lambda_st", self.lambda_st),
            ("gamma", self.gamma),
            ("sigma", self.sigma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be finite, got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema_decay must lie in [0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.batch_clean == 0 || self.batch_noisy == 0 || self.batch_baseline == 0 {
            return Err(Error::Config(format!(
                "batch sizes must be positive, got {}, {}, and {}",
                self.batch_clean, self.batch_noisy, self.batch_baseline
            )));
        }
        if self.width == 0 {
            return Err(Error::Config(format!("width must be positive, got {}", self.width)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = HyperConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.alpha, 0.005);
        assert_eq!(cfg.ema_decay, 0.99);
        assert_eq!((cfg.epochs_baseline, cfg.epochs_mlb), (30, 100));
    }

    #[test]
    fn bad_values_are_rejected() {
        for f in [
            |c: &mut HyperConfig| c.alpha = 0.0,
            |c: &mut HyperConfig| c.baseline_lr = -0.1,
            |c: &mut HyperConfig| c.beta = -1.0,
            |c: &mut HyperConfig| c.eps = 0.0,
            |c: &mut HyperConfig| c.ema_decay = 1.0,
            |c: &mut HyperConfig| c.batch_noisy = 0,
            |c: &mut HyperConfig| c.batch_baseline = 0,
            |c: &mut HyperConfig| c.sigma = f64::NAN,
        ] {
            let mut cfg = HyperConfig::default();
            f(&mut cfg);
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
