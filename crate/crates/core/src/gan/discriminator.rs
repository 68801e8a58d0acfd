use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layers::{Conv, LEAKY_SLOPE};
use super::{GeneratorConfig, StageState};
use crate::autodiff::{ParamStore, PowerState, Real, Tape, Var};
use crate::error::{bail, Result};

/// Progressive discriminator mirroring the generator's decoder at half its
/// channel widths, without skips or normalization. It scores a candidate map
/// concatenated with the conditioning inputs; the score is the spatial mean of a
/// one-channel map, unbounded.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    pub spectral_norm: bool,
    final_stage: usize,
    cond_channels: usize,
    /// One 1x1 entry layer per stage.
    from_image: Vec<Conv>,
    /// `blocks[j]` takes stage-`j` features down to stage `j - 1`; `blocks[0]` is unused.
    blocks: Vec<Conv>,
    head: Conv,
    out: Conv,
    /// `(conv, u buffer, v buffer)` for every layer when spectral norm is on.
    power: Vec<(Conv, usize, usize)>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(cfg: &GeneratorConfig, spectral_norm: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.final_stage();
        let ch = |stage: usize| (cfg.channels_at_depth(depth - stage) / 2).max(2);
        let cond_channels = cfg.condition_channels();
        let mut store = ParamStore::new();
        let from_image: Vec<Conv> = (0..=depth)
            .map(|k| Conv::new(&mut store, rng, &format!("d.from_image{k}"), 1 + cond_channels, ch(k), 1, 1, 0))
            .collect();
        let mut blocks = vec![from_image[0]];
        for j in 1..=depth {
            blocks.push(Conv::new(&mut store, rng, &format!("d.block{j}"), ch(j), ch(j - 1), 4, 2, 1));
        }
        let head = Conv::new(&mut store, rng, "d.head", ch(0), ch(0), 3, 1, 1);
        let out = Conv::new(&mut store, rng, "d.out", ch(0), 1, 1, 1, 0);

        let mut power = Vec::new();
        if spectral_norm {
            let layers: Vec<(String, Conv)> = (0..=depth)
                .map(|k| (format!("d.from_image{k}"), from_image[k]))
                .chain((1..=depth).map(|j| (format!("d.block{j}"), blocks[j])))
                .chain([("d.head".to_string(), head), ("d.out".to_string(), out)])
                .collect();
            for (name, conv) in layers {
                let w = store.param(conv.kernel).clone();
                let rows = w.shape()[0];
                let cols = w.numel() / rows;
                let u0 = (0..rows).map(|_| T::lit(StandardNormal.sample(rng))).collect();
                let mut ps = PowerState::new(u0, cols);
                ps.step(w.values());
                let u = store.add_buffer(format!("{name}.sn_u"), ps.u);
                let v = store.add_buffer(format!("{name}.sn_v"), ps.v);
                power.push((conv, u, v));
            }
        }
        Ok(Self {
            store,
            spectral_norm,
            final_stage: depth,
            cond_channels,
            from_image,
            blocks,
            head,
            out,
            power,
        })
    }

    /// One power-iteration step on every layer's singular-vector estimates.
    pub fn power_iterate(&mut self) {
        for &(conv, u, v) in &self.power {
            let mut ps = PowerState {
                u: self.store.buffer(u).to_vec(),
                v: self.store.buffer(v).to_vec(),
            };
            ps.step(self.store.param(conv.kernel).values());
            *self.store.buffer_mut(u) = ps.u;
            *self.store.buffer_mut(v) = ps.v;
        }
    }

    /// Largest singular-value estimate of each normalized layer, for diagnostics.
    pub fn sigma_estimates(&self) -> Vec<T> {
        self.power
            .iter()
            .map(|&(conv, u, v)| {
                let ps = PowerState {
                    u: self.store.buffer(u).to_vec(),
                    v: self.store.buffer(v).to_vec(),
                };
                ps.sigma(self.store.param(conv.kernel).values())
            })
            .collect()
    }

    fn conv(&self, tape: &mut Tape<T>, vars: &[Var], conv: &Conv, x: Var) -> Result<Var> {
        if !self.spectral_norm {
            return conv.apply(tape, vars, x);
        }
        let &(_, u, v) = self
            .power
            .iter()
            .find(|(c, _, _)| c.kernel == conv.kernel)
            .expect("every layer has a power state");
        conv.apply_normalized(tape, vars, x, self.store.buffer(u), self.store.buffer(v))
    }

    /// Scores of shape `(B, 1)` for `candidate` `(B, 1, r, r)` under conditioning
    /// `(B, C, r, r)`, `r` the stage resolution.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var], candidate: Var, cond: Var, stage: &StageState) -> Result<Var> {
        stage.validate()?;
        let k = stage.stage_index;
        if k > self.final_stage {
            bail!(State, "stage {k} beyond final stage {}", self.final_stage);
        }
        let res = 4usize << k;
        let cs = tape.shape(candidate).to_vec();
        let xs = tape.shape(cond).to_vec();
        if cs.len() != 4 || cs[1] != 1 || cs[2] != res || cs[3] != res {
            bail!(Shape, "candidate must be (B, 1, {res}, {res}) at stage {k}, got {cs:?}");
        }
        if xs.len() != 4 || xs[1] != self.cond_channels || xs[2] != res || xs[3] != res || xs[0] != cs[0] {
            bail!(
                Shape,
                "conditioning must be ({}, {}, {res}, {res}), got {xs:?}",
                cs[0],
                self.cond_channels
            );
        }
        let slope = T::lit(LEAKY_SLOPE);
        let x = tape.concat_channels(candidate, cond)?;
        let mut h = self.conv(tape, vars, &self.from_image[k], x)?;
        h = tape.leaky_relu(h, slope);
        if k > 0 {
            h = self.conv(tape, vars, &self.blocks[k], h)?;
            h = tape.leaky_relu(h, slope);
            if stage.alpha < 1.0 {
                let down = tape.downsample2x_avg(x)?;
                let p = self.conv(tape, vars, &self.from_image[k - 1], down)?;
                let p = tape.leaky_relu(p, slope);
                h = tape.mix(h, p, T::lit(stage.alpha))?;
            }
            for j in (1..k).rev() {
                h = self.conv(tape, vars, &self.blocks[j], h)?;
                h = tape.leaky_relu(h, slope);
            }
        }
        h = self.conv(tape, vars, &self.head, h)?;
        h = tape.leaky_relu(h, slope);
        let s = self.conv(tape, vars, &self.out, h)?;
        let s = tape.mean_spatial(s)?;
        Ok(s)
    }
}
