use rand::Rng;

use super::layers::{Conv, LEAKY_SLOPE};
use super::{GeneratorConfig, StageState};
use crate::autodiff::{BatchNorm, BatchStats, ParamStore, Real, Tape, Var};
use crate::error::{bail, Result};

/// U-Net generator: a fixed encoder from the input resolution down to a 4x4
/// bottleneck and a decoder that grows one 2x stage at a time, each stage with
/// its own 1x1 to-image head.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub cfg: GeneratorConfig,
    pub store: ParamStore<T>,
    /// `enc[0]` is a 3x3 stem at full resolution; `enc[j]` halves the resolution.
    enc: Vec<(Conv, Option<BatchNorm>)>,
    dec: Vec<(Conv, BatchNorm)>,
    to_image: Vec<Conv>,
}

/// Statistics of every train-mode batch norm in one forward pass.
pub type BnUpdates<T> = Vec<(BatchNorm, BatchStats<T>)>;

impl<T: Real> Generator<T> {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.final_stage();
        let mut store = ParamStore::new();
        let ch = |e: usize| cfg.channels_at_depth(e);
        let mut enc = vec![(
            Conv::new(&mut store, rng, "g.enc0", cfg.input_channels, ch(0), 3, 1, 1),
            None,
        )];
        for e in 1..=depth {
            let conv = Conv::new(&mut store, rng, &format!("g.enc{e}"), ch(e - 1), ch(e), 4, 2, 1);
            let bn = BatchNorm::new(&mut store, &format!("g.enc{e}.bn"), ch(e));
            enc.push((conv, Some(bn)));
        }
        let mut dec = Vec::new();
        let mut to_image = Vec::new();
        for k in 0..=depth {
            let skip = ch(depth - k);
            let in_ch = if k == 0 { skip } else { ch(depth - k + 1) + skip };
            let out = ch(depth - k);
            let conv = Conv::new(&mut store, rng, &format!("g.dec{k}"), in_ch, out, 3, 1, 1);
            let bn = BatchNorm::new(&mut store, &format!("g.dec{k}.bn"), out);
            dec.push((conv, bn));
            to_image.push(Conv::new(&mut store, rng, &format!("g.to_image{k}"), out, 1, 1, 1, 0));
        }
        Ok(Self {
            cfg,
            store,
            enc,
            dec,
            to_image,
        })
    }

    /// Probability map at the stage resolution, `(B, 1, r, r)` with `r = 4 · 2^stage`.
    /// With `train` the batch norms use batch statistics, which are returned.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        input: Var,
        stage: &StageState,
        train: bool,
    ) -> Result<(Var, BnUpdates<T>)> {
        stage.validate()?;
        let depth = self.cfg.final_stage();
        if stage.stage_index > depth {
            bail!(State, "stage {} beyond final stage {depth}", stage.stage_index);
        }
        let shape = tape.shape(input).to_vec();
        let res = self.cfg.max_resolution;
        if shape.len() != 4 || shape[1] != self.cfg.input_channels || shape[2] != res || shape[3] != res {
            bail!(
                Shape,
                "generator expects (B, {}, {res}, {res}) input, got {shape:?}",
                self.cfg.input_channels
            );
        }
        let mut stats = Vec::new();
        let slope = T::lit(LEAKY_SLOPE);

        let mut feats = Vec::with_capacity(depth + 1);
        let mut h = input;
        for (conv, bn) in &self.enc {
            h = conv.apply(tape, vars, h)?;
            if let Some(bn) = bn {
                let (y, s) = bn.forward(tape, &self.store, vars, h, train)?;
                stats.extend(s.map(|s| (*bn, s)));
                h = y;
            }
            h = tape.leaky_relu(h, slope);
            feats.push(h);
        }

        let k = stage.stage_index;
        let mut d = feats[depth];
        let mut prev = None;
        for j in 0..=k {
            let (conv, bn) = &self.dec[j];
            if j > 0 {
                prev = Some(d);
                let up = tape.upsample2x(d)?;
                d = tape.concat_channels(up, feats[depth - j])?;
            }
            d = conv.apply(tape, vars, d)?;
            let (y, s) = bn.forward(tape, &self.store, vars, d, train)?;
            stats.extend(s.map(|s| (*bn, s)));
            d = tape.relu(y);
        }
        let logits = self.to_image[k].apply(tape, vars, d)?;
        let out = tape.sigmoid(logits);
        let alpha = T::lit(stage.alpha);
        if k == 0 || stage.alpha >= 1.0 {
            return Ok((out, stats));
        }
        let prev_logits = self.to_image[k - 1].apply(tape, vars, prev.unwrap())?;
        let prev_out = tape.sigmoid(prev_logits);
        let prev_up = tape.upsample2x(prev_out)?;
        Ok((tape.mix(out, prev_up, alpha)?, stats))
    }

    pub fn apply_bn_updates(&mut self, updates: &BnUpdates<T>) {
        for (bn, s) in updates {
            bn.update_running(&mut self.store, s);
        }
    }
}
