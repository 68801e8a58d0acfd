//! Progressive-growing training: stage schedule, alternating discriminator and
//! generator updates, checkpoints, and thresholded inference.

mod checkpoint;
mod data;
mod run;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use data::{InputMode, PreparedSample, TrainingSet};
pub use run::{train, water_violation_rate, StepReport, TrainOutcome, Trainer, TRAIN_LOG_FILE, TRAIN_LOG_HEADER};

use crate::error::{bail, Result};
use crate::gan::{GeneratorConfig, LossWeights, StageState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_iters: usize,
    pub iters_per_stage: usize,
    /// Fraction of each stage over which α ramps from 0 to 1.
    pub fade_fraction: f64,
    pub base_lr: f64,
    /// First cosine cycle length in iterations.
    pub lr_period0: usize,
    /// Growth factor of successive cosine cycles.
    pub lr_period_mult: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub geo_enabled: bool,
    pub adversarial_enabled: bool,
    pub spectral_norm: bool,
    /// Inputs are DEM, water and a constant population channel, without NTL.
    pub physical_only: bool,
    pub noise_enabled: bool,
    pub output_threshold: f64,
    pub max_resolution: usize,
    /// Resolution of the first trained stage.
    pub min_resolution: usize,
    pub base_channels: usize,
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_iters: 3000,
            iters_per_stage: 1000,
            fade_fraction: 0.5,
            base_lr: 1e-4,
            lr_period0: 500,
            lr_period_mult: 1,
            seed: 0,
            weights: LossWeights::default(),
            geo_enabled: true,
            adversarial_enabled: true,
            spectral_norm: false,
            physical_only: false,
            noise_enabled: false,
            output_threshold: 0.9,
            max_resolution: 32,
            min_resolution: 8,
            base_channels: 8,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            input_channels: 3 + self.noise_enabled as usize,
            base_channels: self.base_channels,
            max_resolution: self.max_resolution,
            noise_enabled: self.noise_enabled,
        }
    }

    pub fn input_mode(&self) -> InputMode {
        if self.physical_only {
            InputMode::PhysicalOnly
        } else {
            InputMode::Full
        }
    }

    /// Stage index of the first trained stage.
    pub fn first_stage(&self) -> usize {
        (self.min_resolution / 4).max(1).ilog2() as usize
    }

    pub fn final_stage(&self) -> usize {
        self.generator_config().final_stage()
    }

    pub fn num_stages(&self) -> usize {
        self.final_stage() + 1 - self.first_stage()
    }

    /// First iteration at which the final stage is fully faded in.
    pub fn full_growth_iter(&self) -> usize {
        let n = self.num_stages();
        if n == 1 {
            return 0;
        }
        (n - 1) * self.iters_per_stage + (self.fade_fraction * self.iters_per_stage as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.generator_config().validate()?;
        self.weights.validate()?;
        if self.batch_size < 2 {
            bail!(Argument, "batch_size must be at least 2, got {}", self.batch_size);
        }
        if !(self.fade_fraction > 0.0 && self.fade_fraction <= 1.0) {
            bail!(Argument, "fade_fraction must lie in (0, 1], got {}", self.fade_fraction);
        }
        if self.iters_per_stage == 0 || self.total_iters == 0 || self.lr_period0 == 0 || self.checkpoint_interval == 0 {
            bail!(Argument, "iteration counts must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!(Argument, "base_lr must be positive, got {}", self.base_lr);
        }
        if !(self.output_threshold > 0.0 && self.output_threshold < 1.0) {
            bail!(Argument, "output_threshold must lie in (0, 1), got {}", self.output_threshold);
        }
        let (lo, hi) = (self.min_resolution, self.max_resolution);
        if lo < 4 || !lo.is_power_of_two() || lo > hi {
            bail!(Argument, "min_resolution must be a power of two in [4, {hi}], got {lo}");
        }
        if self.total_iters <= self.full_growth_iter() {
            bail!(
                Argument,
                "total_iters {} ends before the final stage is grown (needs more than {})",
                self.total_iters,
                self.full_growth_iter()
            );
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Stage, fade-in α and loss flags in effect at `iter`. The first trained stage
/// has α = 1; each later stage ramps α linearly over its first `fade_fraction`.
/// Adversarial and geo losses switch on only once the final stage is fully grown.
pub fn schedule_stage(iter: usize, cfg: &TrainConfig) -> StageState {
    let ips = cfg.iters_per_stage.max(1);
    let s = (iter / ips).min(cfg.num_stages() - 1);
    let stage_index = cfg.first_stage() + s;
    let alpha = if s == 0 {
        1.0
    } else {
        let pos = (iter - s * ips) as f64;
        (pos / (cfg.fade_fraction * ips as f64)).min(1.0)
    };
    let grown = stage_index == cfg.final_stage() && alpha >= 1.0;
    StageState {
        stage_index,
        alpha,
        adversarial_active: grown && cfg.adversarial_enabled,
        geo_active: grown && cfg.geo_enabled,
    }
}
