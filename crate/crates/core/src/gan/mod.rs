//! Progressive-growing conditional GAN: U-Net generator with a growing decoder,
//! mirrored progressive discriminator, and the generator/discriminator losses.

mod discriminator;
mod generator;
mod layers;

use serde::{Deserialize, Serialize};

pub use discriminator::Discriminator;
pub use generator::{BnUpdates, Generator};
pub use layers::{Conv, LEAKY_SLOPE, SN_EPS};

use crate::autodiff::{PowerState, Real, Tape, Var};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Including the noise channel when enabled.
    pub input_channels: usize,
    pub base_channels: usize,
    pub max_resolution: usize,
    pub noise_enabled: bool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.max_resolution;
        if r < 8 || !r.is_power_of_two() {
            bail!(Argument, "max_resolution must be a power of two >= 8, got {r}");
        }
        if self.base_channels < 4 {
            bail!(Argument, "base_channels must be at least 4, got {}", self.base_channels);
        }
        if self.input_channels < 1 + self.noise_enabled as usize {
            bail!(Argument, "input_channels too small for the conditioning inputs");
        }
        Ok(())
    }

    /// Index of the stage emitting `max_resolution`.
    pub fn final_stage(&self) -> usize {
        (self.max_resolution / 4).ilog2() as usize
    }

    /// Encoder width `e` halvings below full resolution, capped at 4x base.
    pub fn channels_at_depth(&self, e: usize) -> usize {
        (self.base_channels << e.min(2)).min(self.base_channels * 4)
    }

    /// Input channels the discriminator is conditioned on (noise excluded).
    pub fn condition_channels(&self) -> usize {
        self.input_channels - self.noise_enabled as usize
    }
}

pub fn stage_resolution(stage_index: usize) -> usize {
    4 << stage_index
}

/// Progressive-growing state: stage `k` emits `4 · 2^k` pixels per side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageState {
    pub stage_index: usize,
    pub alpha: f64,
    pub adversarial_active: bool,
    pub geo_active: bool,
}

impl StageState {
    /// Fully grown, no fade, with the given loss flags.
    pub fn grown(stage_index: usize, adversarial_active: bool, geo_active: bool) -> Self {
        Self {
            stage_index,
            alpha: 1.0,
            adversarial_active,
            geo_active,
        }
    }

    pub fn fading(stage_index: usize, alpha: f64) -> Self {
        Self {
            stage_index,
            alpha,
            adversarial_active: false,
            geo_active: false,
        }
    }

    pub fn resolution(&self) -> usize {
        stage_resolution(self.stage_index)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(State, "fade-in alpha {} outside [0, 1]", self.alpha);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 50.0,
            lambda_geo: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_geo >= 0.0) {
            bail!(Argument, "loss weights must be non-negative");
        }
        Ok(())
    }
}

fn check_scores<T: Real>(tape: &Tape<T>, s: Var) -> Result<()> {
    if tape.value(s).is_empty() {
        bail!(Argument, "empty score batch");
    }
    Ok(())
}

/// `½ mean((s_real − 1)²) + ½ mean(s_fake²)`.
pub fn lsgan_d_loss<T: Real>(tape: &mut Tape<T>, s_real: Var, s_fake: Var) -> Result<Var> {
    check_scores(tape, s_real)?;
    check_scores(tape, s_fake)?;
    if tape.value(s_real).len() != tape.value(s_fake).len() {
        bail!(Shape, "real and fake score batches differ in size");
    }
    let r = tape.half_squared_error(s_real, T::one())?;
    let f = tape.half_squared_error(s_fake, T::zero())?;
    tape.add(r, f)
}

/// `½ mean((s_fake − 1)²)`.
pub fn lsgan_g_loss<T: Real>(tape: &mut Tape<T>, s_fake: Var) -> Result<Var> {
    check_scores(tape, s_fake)?;
    tape.half_squared_error(s_fake, T::one())
}

/// Per-pixel mean absolute difference.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, generated: Var, label: Var) -> Result<Var> {
    tape.l1_mean(generated, label)
}

/// Per-pixel mean of `water ⊙ generated`: the urban probability placed on water.
pub fn geo_loss<T: Real>(tape: &mut Tape<T>, generated: Var, water: &[T]) -> Result<Var> {
    if let Some(w) = water.iter().find(|&&w| w != T::zero() && w != T::one()) {
        bail!(Argument, "water mask must be binary, found {w}");
    }
    tape.weighted_mean(generated, water)
}

/// `λ_l1 · l1`, plus `adv` and `λ_geo · geo` when the stage has those losses active.
pub fn total_g_objective(adv: f64, l1: f64, geo: f64, w: &LossWeights, stage: &StageState) -> f64 {
    let mut total = w.lambda_l1 * l1;
    if stage.adversarial_active {
        total += adv;
    }
    if stage.geo_active {
        total += w.lambda_geo * geo;
    }
    total
}

/// Tape form of [`total_g_objective`]; inactive terms are left off the graph.
pub fn total_g_objective_var<T: Real>(
    tape: &mut Tape<T>,
    adv: Option<Var>,
    l1: Var,
    geo: Option<Var>,
    w: &LossWeights,
    stage: &StageState,
) -> Result<Var> {
    let mut total = tape.scale(l1, T::lit(w.lambda_l1));
    if let (true, Some(a)) = (stage.adversarial_active, adv) {
        total = tape.add(a, total)?;
    }
    if let (true, Some(g)) = (stage.geo_active, geo) {
        let g = tape.scale(g, T::lit(w.lambda_geo));
        total = tape.add(total, g)?;
    }
    Ok(total)
}

/// One power-iteration step on `state` followed by division of the kernel by the
/// resulting top singular-value estimate. A zero kernel stays zero.
pub fn spectral_normalize<T: Real>(tape: &mut Tape<T>, kernel: Var, state: &mut PowerState<T>) -> Result<Var> {
    let rows = tape.shape(kernel)[0];
    let cols = tape.value(kernel).len() / rows.max(1);
    if state.u.len() != rows || state.v.len() != cols {
        bail!(Shape, "power state does not match kernel {:?}", tape.shape(kernel));
    }
    state.step(tape.value(kernel));
    tape.spectral_divide(kernel, &state.u, &state.v, T::lit(SN_EPS))
}
