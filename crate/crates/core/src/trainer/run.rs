use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::checkpoint::{restore_store, store_blocks, Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
use super::data::TrainingSet;
use super::{schedule_stage, TrainConfig};
use crate::autodiff::{adam_step, cosine_warm_restart_lr, OptimizerState, Tape, Tensor};
use crate::dataset::{derive_seed, CitySample, Manifest, Split};
use crate::error::{bail, Error, Result};
use crate::gan::{
    geo_loss, l1_loss, lsgan_d_loss, lsgan_g_loss, total_g_objective_var, Discriminator, Generator, StageState,
};
use crate::raster::{binarize, Domain, Grid};

pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: &str = "iter,stage,alpha,lr,d_loss,g_loss,l1,geo";

const INIT_SALT: u64 = 0x1157;
const SHUFFLE_SALT: u64 = 0x5a0f;
const NOISE_SALT: u64 = 0x2015;
const GENERATE_SALT: u64 = 0x6e1e;

/// Losses of one iteration. `d_loss` is `None` when no discriminator update ran;
/// `geo` is the measured water penalty whether or not it entered `g_loss`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub iter: usize,
    pub stage: usize,
    pub alpha: f64,
    pub lr: f64,
    pub d_loss: Option<f64>,
    pub g_loss: f64,
    pub l1: f64,
    pub geo: f64,
}

impl StepReport {
    pub fn csv_row(&self) -> String {
        let d = self.d_loss.map_or_else(|| "NA".to_string(), |v| v.to_string());
        format!(
            "{},{},{},{},{d},{},{},{}",
            self.iter, self.stage, self.alpha, self.lr, self.g_loss, self.l1, self.geo
        )
    }
}

/// Both networks, their optimizers and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    opt_g: OptimizerState<f32>,
    opt_d: OptimizerState<f32>,
    iter: usize,
    stage: StageState,
    population_scale: f64,
}

fn check_finite(iter: usize, name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training {
            iter,
            reason: format!("{name} is {v}"),
        })
    }
}

fn id_seed(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl Trainer {
    pub fn new(cfg: TrainConfig, population_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_SALT));
        let gcfg = cfg.generator_config();
        let generator = Generator::new(gcfg, &mut rng)?;
        let discriminator = Discriminator::new(&gcfg, cfg.spectral_norm, &mut rng)?;
        let opt_g = OptimizerState::new(generator.store.params());
        let opt_d = OptimizerState::new(discriminator.store.params());
        let stage = schedule_stage(0, &cfg);
        Ok(Self {
            cfg,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iter: 0,
            stage,
            population_scale,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let mut t = Self::new(meta.config.clone(), meta.population_scale)?;
        restore_store("g", &ckpt.blocks, &mut t.generator.store, &mut t.opt_g, meta.generator_steps)?;
        restore_store("d", &ckpt.blocks, &mut t.discriminator.store, &mut t.opt_d, meta.discriminator_steps)?;
        let n = ckpt.blocks.len();
        let known = ckpt.blocks.iter().filter(|b| b.name.starts_with("g.") || b.name.starts_with("d.")).count();
        if known != n {
            bail!(Format, "checkpoint has {} unrecognized blocks", n - known);
        }
        t.iter = meta.iter;
        t.stage = meta.stage;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut blocks = Vec::new();
        store_blocks("g", &self.generator.store, &self.opt_g, &mut blocks);
        store_blocks("d", &self.discriminator.store, &self.opt_d, &mut blocks);
        Checkpoint {
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT.to_string(),
                iter: self.iter,
                stage: self.stage,
                config: self.cfg.clone(),
                config_hash: self.cfg.hash(),
                population_scale: self.population_scale,
                generator_steps: self.opt_g.step,
                discriminator_steps: self.opt_d.step,
            },
            blocks,
        }
    }

    /// Completed iterations.
    pub fn iter(&self) -> usize {
        self.iter
    }

    /// Stage of the last completed iteration.
    pub fn stage(&self) -> StageState {
        self.stage
    }

    pub fn population_scale(&self) -> f64 {
        self.population_scale
    }

    fn check_data(&self, data: &TrainingSet) -> Result<()> {
        if data.mode != self.cfg.input_mode() {
            bail!(Argument, "data prepared for {:?} inputs, model uses {:?}", data.mode, self.cfg.input_mode());
        }
        if data.final_stage != self.cfg.final_stage() {
            bail!(Argument, "data resolution does not match max_resolution {}", self.cfg.max_resolution);
        }
        Ok(())
    }

    /// Sample indices of the minibatch for `iter`: consecutive slices of a
    /// per-epoch permutation, the trailing partial batch dropped.
    pub fn batch_indices(&self, iter: usize, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n);
        let per_epoch = (n / b.max(1)).max(1);
        let (epoch, j) = (iter / per_epoch, iter % per_epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        let seed = derive_seed(derive_seed(self.cfg.seed, SHUFFLE_SALT), epoch as u64);
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        perm[j * b..(j + 1) * b].to_vec()
    }

    /// One discriminator update (when the adversarial loss is active) followed by
    /// one generator update.
    pub fn step(&mut self, data: &TrainingSet) -> Result<StepReport> {
        self.check_data(data)?;
        if data.len() < 2 {
            bail!(Argument, "training needs at least 2 samples, got {}", data.len());
        }
        let cfg = &self.cfg;
        let iter = self.iter;
        let stage = schedule_stage(iter, cfg);
        let lr = cosine_warm_restart_lr(iter, cfg.base_lr, cfg.lr_period0, cfg.lr_period_mult);
        let idx = self.batch_indices(iter, data.len());
        let mut noise = cfg
            .noise_enabled
            .then(|| ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, NOISE_SALT), iter as u64)));
        let batch = data.batch(&idx, stage.stage_index, noise.as_mut().map(|r| r as &mut dyn RngCore))?;

        let mut d_loss = None;
        if stage.adversarial_active {
            if self.discriminator.spectral_norm {
                self.discriminator.power_iterate();
            }
            let fake = {
                let mut t = Tape::new();
                let gv = self.generator.store.bind_frozen(&mut t);
                let x = t.leaf(&batch.input);
                let (out, _) = self.generator.forward(&mut t, &gv, x, &stage, true)?;
                Tensor::new(t.shape(out).to_vec(), t.value(out).to_vec())?
            };
            let mut t = Tape::new();
            let dv = self.discriminator.store.bind(&mut t);
            let real = t.leaf(&batch.label);
            let fake = t.leaf(&fake);
            let cond = t.leaf(&batch.cond);
            let sr = self.discriminator.forward(&mut t, &dv, real, cond, &stage)?;
            let sf = self.discriminator.forward(&mut t, &dv, fake, cond, &stage)?;
            let loss = lsgan_d_loss(&mut t, sr, sf)?;
            d_loss = Some(check_finite(iter, "discriminator loss", t.scalar(loss) as f64)?);
            t.backward(loss)?;
            let store = &mut self.discriminator.store;
            store.zero_grad();
            store.accumulate_grads(&t, &dv);
            adam_step(store.params_mut(), &mut self.opt_d, lr)?;
        }

        let mut t = Tape::new();
        let gv = self.generator.store.bind(&mut t);
        let x = t.leaf(&batch.input);
        let (out, bn) = self.generator.forward(&mut t, &gv, x, &stage, true)?;
        let label = t.leaf(&batch.label);
        let l1 = l1_loss(&mut t, out, label)?;
        let geo = geo_loss(&mut t, out, &batch.water)?;
        let adv = if stage.adversarial_active {
            let dv = self.discriminator.store.bind_frozen(&mut t);
            let cond = t.leaf(&batch.cond);
            let s = self.discriminator.forward(&mut t, &dv, out, cond, &stage)?;
            Some(lsgan_g_loss(&mut t, s)?)
        } else {
            None
        };
        let total = total_g_objective_var(&mut t, adv, l1, Some(geo), &cfg.weights, &stage)?;
        let g_loss = check_finite(iter, "generator loss", t.scalar(total) as f64)?;
        let l1_v = check_finite(iter, "l1 loss", t.scalar(l1) as f64)?;
        let geo_v = check_finite(iter, "geo loss", t.scalar(geo) as f64)?;
        t.backward(total)?;
        let store = &mut self.generator.store;
        store.zero_grad();
        store.accumulate_grads(&t, &gv);
        adam_step(store.params_mut(), &mut self.opt_g, lr)?;
        self.generator.apply_bn_updates(&bn);

        self.iter += 1;
        self.stage = stage;
        Ok(StepReport {
            iter,
            stage: stage.stage_index,
            alpha: stage.alpha,
            lr,
            d_loss,
            g_loss,
            l1: l1_v,
            geo: geo_v,
        })
    }

    /// Steps until `total_iters`. With `out_dir`, appends to the CSV log and writes
    /// `ckpt_<iter>.bin` every `checkpoint_interval` iterations, at each stage
    /// boundary and at the end. An aborted run leaves earlier checkpoints in place.
    pub fn run(&mut self, data: &TrainingSet, out_dir: Option<&Path>) -> Result<Vec<StepReport>> {
        self.check_data(data)?;
        let mut log = match out_dir {
            Some(dir) => Some(open_log(dir, self.iter == 0)?),
            None => None,
        };
        let mut reports = Vec::with_capacity(self.cfg.total_iters.saturating_sub(self.iter));
        while self.iter < self.cfg.total_iters {
            let report = match self.step(data) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(log) = log.as_mut() {
                        let _ = log.flush();
                    }
                    return Err(e);
                }
            };
            if report.iter % 100 == 0 {
                log::info!(
                    "iter {} stage {} alpha {:.3} lr {:.3e} d_loss {} g_loss {:.5} l1 {:.5} geo {:.5}",
                    report.iter,
                    report.stage,
                    report.alpha,
                    report.lr,
                    report.d_loss.map_or_else(|| "NA".into(), |v| format!("{v:.5}")),
                    report.g_loss,
                    report.l1,
                    report.geo
                );
            }
            if let (Some(dir), Some(log)) = (out_dir, log.as_mut()) {
                let path = dir.join(TRAIN_LOG_FILE);
                writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(&path, e))?;
                let done = self.iter;
                let boundary = schedule_stage(done, &self.cfg).stage_index != report.stage;
                if done % self.cfg.checkpoint_interval == 0 || boundary || done == self.cfg.total_iters {
                    log.flush().map_err(|e| Error::io(&path, e))?;
                    self.checkpoint().save(&dir.join(Checkpoint::file_name(done)))?;
                }
            }
            reports.push(report);
        }
        if let (Some(dir), Some(log)) = (out_dir, log.as_mut()) {
            log.flush().map_err(|e| Error::io(dir.join(TRAIN_LOG_FILE), e))?;
        }
        Ok(reports)
    }

    /// Final-stage probability maps in eval mode, one per sample.
    pub fn probabilities(&self, data: &TrainingSet) -> Result<Vec<Grid>> {
        self.check_data(data)?;
        let stage = StageState::grown(self.cfg.final_stage(), false, false);
        let res = self.cfg.max_resolution;
        let gv_store = &self.generator.store;
        let mut out = Vec::with_capacity(data.len());
        for (i, s) in data.samples.iter().enumerate() {
            let mut noise = self.cfg.noise_enabled.then(|| {
                ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.cfg.seed, GENERATE_SALT), id_seed(&s.id)))
            });
            let batch = data.batch(&[i], stage.stage_index, noise.as_mut().map(|r| r as &mut dyn RngCore))?;
            let mut t = Tape::new();
            let gv = gv_store.bind_frozen(&mut t);
            let x = t.leaf(&batch.input);
            let (p, _) = self.generator.forward(&mut t, &gv, x, &stage, false)?;
            out.push(Grid::new(res, res, Domain::UnitInterval, t.value(p).to_vec())?);
        }
        Ok(out)
    }

    /// Probability maps thresholded at `output_threshold`.
    pub fn generate(&self, data: &TrainingSet) -> Result<Vec<Grid>> {
        self.probabilities(data)?
            .iter()
            .map(|p| binarize(p, self.cfg.output_threshold as f32))
            .collect()
    }

    /// Prepares `samples` with this model's input mode and population scale.
    pub fn prepare(&self, samples: &[CitySample]) -> Result<TrainingSet> {
        TrainingSet::from_samples(
            samples,
            self.cfg.input_mode(),
            self.cfg.final_stage(),
            Some(self.population_scale),
        )
    }

    pub fn prepare_split(&self, manifest: &Manifest, manifest_dir: &Path, split: Split) -> Result<TrainingSet> {
        TrainingSet::from_manifest(
            manifest,
            manifest_dir,
            split,
            self.cfg.input_mode(),
            self.cfg.final_stage(),
            Some(self.population_scale),
        )
    }
}

fn open_log(dir: &Path, fresh: bool) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(TRAIN_LOG_FILE);
    let new_file = fresh || !path.exists();
    let file = if new_file {
        File::create(&path)
    } else {
        OpenOptions::new().append(true).open(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    if new_file {
        writeln!(w, "{TRAIN_LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub reports: Vec<StepReport>,
}

/// Trains from scratch on the manifest's train split.
pub fn train(manifest: &Manifest, manifest_dir: &Path, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainingSet::from_manifest(
        manifest,
        manifest_dir,
        Split::Train,
        cfg.input_mode(),
        cfg.final_stage(),
        None,
    )?;
    if data.is_empty() {
        bail!(Argument, "manifest has no training samples");
    }
    let mut trainer = Trainer::new(cfg.clone(), data.population_scale)?;
    let reports = trainer.run(&data, out_dir)?;
    Ok(TrainOutcome { trainer, reports })
}

/// Fraction of generated urban pixels that lie on water, pooled over all maps;
/// `None` when no urban pixel was generated.
pub fn water_violation_rate(generated: &[Grid], water: &[Grid]) -> Result<Option<f64>> {
    if generated.len() != water.len() {
        bail!(Argument, "{} generated maps but {} water masks", generated.len(), water.len());
    }
    let (mut urban, mut on_water) = (0usize, 0usize);
    for (g, w) in generated.iter().zip(water) {
        if g.dims() != w.dims() {
            bail!(Shape, "generated map and water mask differ in size");
        }
        for (&gv, &wv) in g.values().iter().zip(w.values()) {
            if gv > 0.0 {
                urban += 1;
                if wv > 0.0 {
                    on_water += 1;
                }
            }
        }
    }
    Ok((urban > 0).then(|| on_water as f64 / urban as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_city, WaterStyle};
    use crate::trainer::InputMode;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            total_iters: 12,
            iters_per_stage: 4,
            max_resolution: 16,
            min_resolution: 8,
            base_channels: 4,
            checkpoint_interval: 5,
            lr_period0: 10,
            base_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn data(n: u64) -> Vec<CitySample> {
        (0..n).map(|i| synth_city(100 + i, 16, WaterStyle::Mixed.for_index(i as usize)).unwrap()).collect()
    }

    #[test]
    fn violation_rate() {
        let g = Grid::from_fn_binary(4, 4, |x, _| x < 2);
        let w = Grid::from_fn_binary(4, 4, |x, y| x == 0 && y < 2);
        assert_eq!(water_violation_rate(&[g.clone()], &[w.clone()]).unwrap(), Some(0.25));
        let empty = Grid::zeros(4, 4, Domain::Binary);
        assert_eq!(water_violation_rate(&[empty], &[w.clone()]).unwrap(), None);
        assert!(water_violation_rate(&[g], &[]).is_err());
    }

    #[test]
    fn batches_cover_epoch_without_repeats() {
        let t = Trainer::new(tiny_cfg(), 1.0).unwrap();
        let mut seen: Vec<usize> = (0..2).flat_map(|i| t.batch_indices(i, 9)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 8);
        assert_eq!(t.batch_indices(3, 9), t.batch_indices(3, 9));
        assert_eq!(t.batch_indices(0, 3).len(), 3);
    }

    #[test]
    fn growth_phase_reports_l1_only() {
        let cfg = tiny_cfg();
        let set = TrainingSet::from_samples(&data(6), InputMode::Full, 2, None).unwrap();
        let mut t = Trainer::new(cfg.clone(), set.population_scale).unwrap();
        let reports = t.run(&set, None).unwrap();
        assert_eq!(reports.len(), 12);
        for r in &reports {
            let s = schedule_stage(r.iter, &cfg);
            assert_eq!((r.stage, r.alpha), (s.stage_index, s.alpha));
            if s.adversarial_active {
                assert!(r.d_loss.is_some());
            } else {
                assert!(r.d_loss.is_none());
                assert!((r.g_loss - 50.0 * r.l1).abs() <= 1e-5 * r.g_loss.abs().max(1.0));
            }
        }
        assert_eq!(t.stage().alpha, 1.0);
        assert_eq!(t.stage().stage_index, 2);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            spectral_norm: true,
            ..tiny_cfg()
        };
        let set = TrainingSet::from_samples(&data(6), InputMode::Full, 2, None).unwrap();
        let mut full = Trainer::new(cfg.clone(), set.population_scale).unwrap();
        let all = full.run(&set, Some(dir.path())).unwrap();
        for n in [4, 5, 10, 12] {
            assert!(dir.path().join(format!("ckpt_{n}.bin")).exists(), "ckpt_{n}");
        }
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 13);
        assert_eq!(log.lines().next().unwrap(), TRAIN_LOG_HEADER);

        let ckpt = Checkpoint::load(&dir.path().join("ckpt_10.bin")).unwrap();
        assert_eq!(ckpt.meta.iter, 10);
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        let tail = resumed.run(&set, None).unwrap();
        assert_eq!(tail, all[10..].to_vec());
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());

        let back = Trainer::from_checkpoint(&Checkpoint::from_bytes(&full.checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.probabilities(&set).unwrap(), full.probabilities(&set).unwrap());
    }

    #[test]
    fn generation_is_binary_and_repeatable() {
        let cfg = tiny_cfg();
        let samples = data(4);
        let t = Trainer::new(cfg.clone(), 1.0).unwrap();
        let set = t.prepare(&samples).unwrap();
        let a = t.generate(&set).unwrap();
        assert_eq!(a, t.generate(&set).unwrap());
        for (g, s) in a.iter().zip(&samples) {
            assert_eq!(g.dims(), s.label.dims());
            assert_eq!(g.domain(), Domain::Binary);
        }
        let top = t
            .probabilities(&set)
            .unwrap()
            .iter()
            .flat_map(|p| p.values().to_vec())
            .fold(0.0f32, f32::max);
        assert!(top < 0.999);
        let never = Trainer {
            cfg: TrainConfig {
                output_threshold: 0.999,
                ..cfg
            },
            ..t.clone()
        };
        assert!(never.generate(&set).unwrap().iter().all(|g| g.bright_count() == 0));

        let phys = Trainer::new(
            TrainConfig {
                physical_only: true,
                ..tiny_cfg()
            },
            1.0,
        )
        .unwrap();
        assert!(phys.probabilities(&set).is_err());
    }

    #[test]
    fn corrupted_checkpoint_rejected() {
        let t = Trainer::new(tiny_cfg(), 1.0).unwrap();
        let mut ck = t.checkpoint();
        ck.meta.config.seed = 99;
        assert!(Checkpoint::from_bytes(&ck.to_bytes()).is_err());
        let mut ck = t.checkpoint();
        ck.blocks.pop();
        assert!(Trainer::from_checkpoint(&ck).is_err());
    }
}
