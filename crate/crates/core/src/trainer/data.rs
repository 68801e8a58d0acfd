use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataset::{CitySample, Manifest, Split};
use crate::error::{bail, Result};
use crate::gan::stage_resolution;
use crate::raster::{normalize, resize, Channel, Domain, Grid, ResizeMode};

/// Which conditioning layers feed the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    /// Nightlights, DEM, water.
    Full,
    /// DEM, water, and the city's population as a constant layer.
    PhysicalOnly,
}

/// One city converted to network-ready arrays, with every stage resolution
/// precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub label: Grid,
    pub water: Grid,
    /// `(C, R, R)` conditioning inputs at full resolution.
    input: Vec<f32>,
    /// Per stage index: area-averaged conditioning, nearest label, nearest water.
    cond: Vec<Vec<f32>>,
    stage_label: Vec<Vec<f32>>,
    stage_water: Vec<Vec<f32>>,
}

fn continuous(grid: &Grid) -> Grid {
    match grid.domain() {
        Domain::Raw => normalize(grid),
        _ => grid.clone(),
    }
}

impl PreparedSample {
    pub fn new(sample: &CitySample, mode: InputMode, population_scale: f64, final_stage: usize) -> Result<Self> {
        let res = stage_resolution(final_stage);
        if sample.label.dims() != (res, res) {
            bail!(
                Argument,
                "{}: sample is {}x{}, model expects {res}x{res}",
                sample.id,
                sample.label.width(),
                sample.label.height()
            );
        }
        let channel = |ch: Channel| {
            sample.inputs.get(ch).ok_or_else(|| {
                crate::Error::Argument(format!("{}: missing {} channel", sample.id, ch.name()))
            })
        };
        let water = channel(Channel::Water)?.clone();
        let mut layers: Vec<Grid> = Vec::with_capacity(3);
        match mode {
            InputMode::Full => {
                layers.push(continuous(channel(Channel::Ntl)?));
                layers.push(continuous(channel(Channel::Dem)?));
                layers.push(water.clone());
            }
            InputMode::PhysicalOnly => {
                let Some(pop) = sample.population else {
                    bail!(Argument, "{}: physical-only mode needs a population total", sample.id);
                };
                let v = if population_scale > 0.0 { pop / population_scale } else { 0.0 };
                layers.push(continuous(channel(Channel::Dem)?));
                layers.push(water.clone());
                layers.push(Grid::new(res, res, Domain::Raw, vec![v as f32; res * res])?);
            }
        }
        let input = layers.iter().flat_map(|g| g.values().iter().copied()).collect();
        let mut cond = Vec::with_capacity(final_stage + 1);
        let mut stage_label = Vec::with_capacity(final_stage + 1);
        let mut stage_water = Vec::with_capacity(final_stage + 1);
        for k in 0..=final_stage {
            let r = stage_resolution(k);
            let mut c = Vec::with_capacity(layers.len() * r * r);
            for g in &layers {
                c.extend_from_slice(resize(g, r, r, ResizeMode::AreaAverage)?.values());
            }
            cond.push(c);
            stage_label.push(resize(&sample.label, r, r, ResizeMode::Nearest)?.into_values());
            stage_water.push(resize(&water, r, r, ResizeMode::Nearest)?.into_values());
        }
        Ok(Self {
            id: sample.id.clone(),
            label: sample.label.clone(),
            water,
            input,
            cond,
            stage_label,
            stage_water,
        })
    }

    pub fn condition_channels(&self) -> usize {
        self.input.len() / self.label.len()
    }
}

/// Network-ready arrays for one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, C_in, R, R)`, noise last when enabled.
    pub input: Tensor<f32>,
    /// `(B, C, r, r)` at the stage resolution.
    pub cond: Tensor<f32>,
    /// `(B, 1, r, r)`.
    pub label: Tensor<f32>,
    /// Binary, laid out like `label`.
    pub water: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<PreparedSample>,
    pub mode: InputMode,
    pub population_scale: f64,
    pub final_stage: usize,
}

impl TrainingSet {
    /// `population_scale` defaults to the largest population among `samples`.
    pub fn from_samples(
        samples: &[CitySample],
        mode: InputMode,
        final_stage: usize,
        population_scale: Option<f64>,
    ) -> Result<Self> {
        let scale = population_scale.unwrap_or_else(|| {
            samples
                .iter()
                .filter_map(|s| s.population)
                .fold(0.0, f64::max)
        });
        let prepared = samples
            .iter()
            .map(|s| PreparedSample::new(s, mode, scale, final_stage))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples: prepared,
            mode,
            population_scale: scale,
            final_stage,
        })
    }

    pub fn from_manifest(
        manifest: &Manifest,
        manifest_dir: &Path,
        split: Split,
        mode: InputMode,
        final_stage: usize,
        population_scale: Option<f64>,
    ) -> Result<Self> {
        let samples = manifest
            .split(split)
            .map(|e| manifest.load_sample(manifest_dir, e))
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(&samples, mode, final_stage, population_scale)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize], stage_index: usize, noise: Option<&mut dyn rand::RngCore>) -> Result<Batch> {
        if stage_index > self.final_stage {
            bail!(State, "stage {stage_index} beyond final stage {}", self.final_stage);
        }
        let b = indices.len();
        let res = stage_resolution(self.final_stage);
        let r = stage_resolution(stage_index);
        let Some(first) = indices.first().map(|&i| &self.samples[i]) else {
            bail!(Argument, "empty batch");
        };
        let c = first.condition_channels();
        let c_in = c + noise.is_some() as usize;
        let mut input = Vec::with_capacity(b * c_in * res * res);
        let mut cond = Vec::with_capacity(b * c * r * r);
        let mut label = Vec::with_capacity(b * r * r);
        let mut water = Vec::with_capacity(b * r * r);
        let mut noise = noise;
        for &i in indices {
            let s = &self.samples[i];
            input.extend_from_slice(&s.input);
            if let Some(rng) = noise.as_mut() {
                input.extend((0..res * res).map(|_| rng.sample::<f32, _>(StandardNormal)));
            }
            cond.extend_from_slice(&s.cond[stage_index]);
            label.extend_from_slice(&s.stage_label[stage_index]);
            water.extend_from_slice(&s.stage_water[stage_index]);
        }
        Ok(Batch {
            input: Tensor::new(vec![b, c_in, res, res], input)?,
            cond: Tensor::new(vec![b, c, r, r], cond)?,
            label: Tensor::new(vec![b, 1, r, r], label)?,
            water,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_city, WaterStyle};

    #[test]
    fn prepared_layouts() {
        let s = synth_city(3, 16, WaterStyle::River).unwrap();
        let p = PreparedSample::new(&s, InputMode::Full, 1.0, 2).unwrap();
        assert_eq!(p.condition_channels(), 3);
        assert_eq!(p.cond[0].len(), 3 * 16);
        assert_eq!(p.cond[2].len(), 3 * 256);
        assert_eq!(&p.cond[2][..256], s.inputs.get(Channel::Ntl).unwrap().values());
        assert!(p.stage_label[1].iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(p.stage_water[0].iter().all(|&v| v == 0.0 || v == 1.0));

        let pop = s.population.unwrap();
        let p = PreparedSample::new(&s, InputMode::PhysicalOnly, 2.0 * pop, 2).unwrap();
        assert!(p.input[512..].iter().all(|&v| (v - 0.5).abs() < 1e-6));
        assert_eq!(&p.input[256..512], s.inputs.get(Channel::Water).unwrap().values());

        assert!(PreparedSample::new(&s, InputMode::Full, 1.0, 3).is_err());
        let mut no_pop = s.clone();
        no_pop.population = None;
        assert!(PreparedSample::new(&no_pop, InputMode::PhysicalOnly, 1.0, 2).is_err());
    }

    #[test]
    fn batch_shapes_and_noise() {
        let samples: Vec<CitySample> = (0..3).map(|i| synth_city(i, 16, WaterStyle::Coast).unwrap()).collect();
        let set = TrainingSet::from_samples(&samples, InputMode::Full, 2, None).unwrap();
        let b = set.batch(&[2, 0], 1, None).unwrap();
        assert_eq!(b.input.shape(), &[2, 3, 16, 16]);
        assert_eq!(b.cond.shape(), &[2, 3, 8, 8]);
        assert_eq!(b.label.shape(), &[2, 1, 8, 8]);
        assert_eq!(b.water.len(), 128);
        assert_eq!(&b.input.values()[..768], &set.samples[2].input[..]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let b = set.batch(&[0, 1], 2, Some(&mut rng)).unwrap();
        assert_eq!(b.input.shape(), &[2, 4, 16, 16]);
        assert!(set.batch(&[], 1, None).is_err());
        assert!(set.batch(&[0], 3, None).is_err());
    }
}
