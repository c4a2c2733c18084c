//! Distance-driven α schedule.
//!
//! α moves linearly from `alpha_min` (clean and adversarial embeddings far
//! apart, `d = d_max`) to `alpha_max = 0.5` (`d = d_min`, where the
//! adversarial view counts as an ordinary augmentation). The first
//! `warmup_epochs` run at a fixed α and their mean distance becomes `d_max`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the schedule: the symmetric split.
pub const ALPHA_MAX: f64 = 0.5;

/// Linear schedule, clamped to `[alpha_min, alpha_max]`.
pub fn anneal_alpha(alpha_min: f64, alpha_max: f64, d_min: f64, d_max: f64, d: f64) -> Result<f64> {
    if !(d_max > d_min) {
        return Err(Error::config(format!(
            "anneal: d_max ({d_max}) must exceed d_min ({d_min})"
        )));
    }
    let alpha = alpha_min + (d_max - d) * (alpha_max - alpha_min) / (d_max - d_min);
    Ok(alpha.clamp(alpha_min, alpha_max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealConfig {
    pub enabled: bool,
    pub alpha_min: f64,
    /// `d_min = d_min_ratio · d_max` once warm.
    pub d_min_ratio: f64,
    pub warmup_epochs: usize,
    /// EMA momentum for the smoothed distance.
    pub momentum: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha_min: 0.2,
            d_min_ratio: 0.25,
            warmup_epochs: 5,
            momentum: 0.9,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=ALPHA_MAX).contains(&self.alpha_min) {
            return Err(Error::config(format!(
                "anneal.alpha_min must lie in [0, {ALPHA_MAX}], got {}",
                self.alpha_min
            )));
        }
        if !(0.0..1.0).contains(&self.d_min_ratio) {
            return Err(Error::config("anneal.d_min_ratio must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("anneal.momentum must lie in [0, 1)"));
        }
        if self.enabled && self.warmup_epochs == 0 {
            return Err(Error::config(
                "anneal.warmup_epochs must be >= 1 to establish d_max",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealState {
    pub enabled: bool,
    pub fixed_alpha: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub d_min_ratio: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub d_smooth: f64,
    pub warm: bool,
    warm_sum: f64,
    warm_count: usize,
}

impl AnnealState {
    pub fn new(cfg: &AnnealConfig, fixed_alpha: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            enabled: cfg.enabled,
            fixed_alpha,
            alpha_min: cfg.alpha_min,
            alpha_max: ALPHA_MAX,
            d_min: 0.0,
            d_max: 0.0,
            d_min_ratio: cfg.d_min_ratio,
            warmup_epochs: cfg.warmup_epochs,
            momentum: cfg.momentum,
            d_smooth: 0.0,
            warm: false,
            warm_sum: 0.0,
            warm_count: 0,
        })
    }

    /// Already-warm state with explicit bounds.
    pub fn warm(alpha_min: f64, d_min: f64, d_max: f64, momentum: f64) -> Self {
        Self {
            enabled: true,
            fixed_alpha: ALPHA_MAX,
            alpha_min,
            alpha_max: ALPHA_MAX,
            d_min,
            d_max,
            d_min_ratio: if d_max > 0.0 { d_min / d_max } else { 0.0 },
            warmup_epochs: 0,
            momentum,
            d_smooth: d_max,
            warm: true,
            warm_sum: 0.0,
            warm_count: 0,
        }
    }

    /// Folds one batch-mean clean–adversarial distance into the state and
    /// returns the α to use for that batch.
    pub fn observe(&mut self, d_batch: f64) -> Result<f64> {
        if !self.enabled {
            return Ok(self.fixed_alpha);
        }
        if d_batch < 0.0 || !d_batch.is_finite() {
            return Err(Error::Domain {
                op: "anneal",
                msg: format!("distance {d_batch}"),
            });
        }
        if !self.warm {
            self.warm_sum += d_batch;
            self.warm_count += 1;
            return Ok(self.fixed_alpha);
        }
        self.d_smooth = self.momentum * self.d_smooth + (1.0 - self.momentum) * d_batch;
        anneal_alpha(
            self.alpha_min,
            self.alpha_max,
            self.d_min,
            self.d_max,
            self.d_smooth,
        )
    }

    /// Call after each completed epoch (1-based count).
    pub fn end_epoch(&mut self, epochs_done: usize) -> Result<()> {
        if !self.enabled || self.warm || epochs_done < self.warmup_epochs {
            return Ok(());
        }
        if self.warm_count == 0 {
            return Err(Error::config("anneal: no distances observed during warm-up"));
        }
        self.d_max = self.warm_sum / self.warm_count as f64;
        self.d_min = self.d_min_ratio * self.d_max;
        self.d_smooth = self.d_max;
        self.warm = true;
        if !(self.d_max > self.d_min) {
            return Err(Error::config(format!(
                "anneal: warm-up produced d_max = {} <= d_min = {}",
                self.d_max, self.d_min
            )));
        }
        log::info!(
            "anneal: warm after {epochs_done} epochs, d_max = {:.6}, d_min = {:.6}",
            self.d_max,
            self.d_min
        );
        Ok(())
    }
}
