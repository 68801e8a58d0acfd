use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CitySample, DEFAULT_WINDOW_KM};
use crate::error::{bail, Error, Result};
use crate::raster::{Channel, Domain, Grid, Stack};

pub const SYNTH_SIZES: [usize; 4] = [8, 16, 32, 64];
pub const SYNTH_YEAR: i32 = 2020;
/// Exponent of the settlement-area distribution.
const AREA_EXPONENT: f64 = -2.0;
const NTL_NOISE: f64 = 0.05;
/// Weight of the wide light halo that spills past settlement edges, including over water.
const NTL_BLOOM: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaterStyle {
    Coast,
    River,
    None,
    /// Alternates coast and river by sample index.
    Mixed,
}

impl WaterStyle {
    pub fn for_index(self, i: usize) -> WaterStyle {
        match self {
            WaterStyle::Mixed if i % 2 == 0 => WaterStyle::River,
            WaterStyle::Mixed => WaterStyle::Coast,
            s => s,
        }
    }
}

impl std::str::FromStr for WaterStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coast" => Ok(WaterStyle::Coast),
            "river" => Ok(WaterStyle::River),
            "none" => Ok(WaterStyle::None),
            "mixed" => Ok(WaterStyle::Mixed),
            _ => bail!(Argument, "unknown water style {s:?} (coast|river|none|mixed)"),
        }
    }
}

/// Deterministic synthetic city: water per style, value-noise terrain, power-law
/// settlement blobs kept off the water, and night lights derived from the blobs.
pub fn synth_city(seed: u64, size: usize, water_style: WaterStyle) -> Result<CitySample> {
    if !SYNTH_SIZES.contains(&size) {
        bail!(Argument, "synthetic size must be one of {SYNTH_SIZES:?}, got {size}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let water = match water_style.for_index(rng.random_range(0..2)) {
        WaterStyle::Coast => coast(&mut rng, size),
        WaterStyle::River => river(&mut rng, size),
        _ => vec![false; size * size],
    };
    let dem = value_noise(&mut rng, size, (size / 4).max(2));
    let label = settlements(&mut rng, size, &water);

    let label_f: Vec<f32> = label.iter().map(|&b| b as u8 as f32).collect();
    let noise = Normal::new(0.0, NTL_NOISE).unwrap();
    let halo = box_blur(&label_f, size, 2);
    let ntl: Vec<f32> = blur3(&label_f, size)
        .into_iter()
        .zip(&halo)
        .map(|(v, h)| ((v + NTL_BLOOM * h) as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    let population: Vec<f32> = halo.iter().map(|v| v * 1000.0).collect();

    let mut inputs = Stack::new();
    inputs.insert(Channel::Ntl, Grid::new(size, size, Domain::UnitInterval, ntl)?)?;
    inputs.insert(Channel::Dem, Grid::new(size, size, Domain::UnitInterval, dem)?)?;
    let water_f = water.iter().map(|&b| b as u8 as f32).collect();
    inputs.insert(Channel::Water, Grid::new(size, size, Domain::Binary, water_f)?)?;
    let pop_total = population.iter().map(|&v| v as f64).sum();
    inputs.insert(Channel::Population, Grid::new(size, size, Domain::Raw, population)?)?;
    let label = Grid::new(size, size, Domain::Binary, label_f)?;
    CitySample::new(
        format!("synth{seed:016x}"),
        SYNTH_YEAR,
        inputs,
        label,
        DEFAULT_WINDOW_KM * 1000.0 / size as f64,
        Some(pop_total),
    )
}

/// Half-plane of water with a noisy shoreline covering 15-35% of the grid.
fn coast(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (theta.cos(), theta.sin());
    let wobble = value_noise(rng, size, (size / 4).max(2));
    let c = size as f64 / 2.0;
    let amp = size as f64 * 0.15;
    let d: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 + 0.5 - c, (i / size) as f64 + 0.5 - c);
            nx * x + ny * y + amp * (wobble[i] as f64 - 0.5)
        })
        .collect();
    let frac = rng.random_range(0.15..0.35);
    let mut sorted = d.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cut = sorted[((frac * (size * size) as f64) as usize).min(size * size - 1)];
    d.into_iter().map(|v| v > cut).collect()
}

/// A 1-3 pixel wide random walk crossing the grid.
fn river(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    let width = rng.random_range(1..=3usize).min(size / 4).max(1);
    let vertical = rng.random_bool(0.5);
    let mut water = vec![false; size * size];
    let mut pos = rng.random_range(size / 4..=3 * size / 4) as isize;
    let mut drift = 0isize;
    for t in 0..size {
        let prev = pos;
        if rng.random_bool(0.35) {
            drift = rng.random_range(-1i32..=1) as isize;
        }
        pos = (pos + drift).clamp(0, (size - width) as isize);
        for across in prev.min(pos)..=prev.max(pos) + width as isize - 1 {
            let a = across.clamp(0, size as isize - 1) as usize;
            let (x, y) = if vertical { (a, t) } else { (t, a) };
            water[y * size + x] = true;
        }
    }
    water
}

/// Bilinear value noise on a lattice of spacing `cell`, rescaled to [0, 1].
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out: Vec<f64> = (0..size * size)
        .map(|i| {
            let fx = (i % size) as f64 / cell as f64;
            let fy = (i / size) as f64 / cell as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
            let at = |x: usize, y: usize| lattice[y * n + x];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            top * (1.0 - ty) + bottom * ty
        })
        .collect();
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in &mut out {
        *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.0 };
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Inverse-CDF sampler for `P(s) ∝ s^AREA_EXPONENT` on `1..=max`.
struct PowerLaw {
    cdf: Vec<f64>,
}

impl PowerLaw {
    fn new(max: usize) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=max)
            .map(|s| {
                acc += (s as f64).powf(AREA_EXPONENT);
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Self { cdf }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1) + 1
    }
}

/// Union of separate blobs with power-law areas. Blobs grow 4-connected from a
/// seed and keep an 8-neighbourhood gap to each other, so every blob is its own
/// 8-connected component.
fn settlements(rng: &mut ChaCha8Rng, size: usize, water: &[bool]) -> Vec<bool> {
    let n = size * size;
    let areas = PowerLaw::new((n / 16).max(4));
    let land = water.iter().filter(|&&w| !w).count();
    let target = (rng.random_range(0.06..0.16) * land as f64).ceil() as usize;
    // blob id + 1 per pixel, 0 for empty
    let mut owner = vec![0u32; n];
    let centre = Normal::new(size as f64 / 2.0, size as f64 / 4.0).unwrap();
    let mut covered = 0;
    let mut blob = 0u32;
    let mut attempts = 0;
    while covered < target && attempts < 400 {
        attempts += 1;
        let x = centre.sample(rng).round();
        let y = centre.sample(rng).round();
        if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
            continue;
        }
        let start = y as usize * size + x as usize;
        blob += 1;
        if !free_for(start, blob, size, water, &owner) {
            continue;
        }
        let area = areas.sample(rng);
        covered += grow(rng, start, area, blob, size, water, &mut owner);
    }
    owner.into_iter().map(|o| o > 0).collect()
}

/// Land, unowned, and not 8-adjacent to a pixel of another blob.
fn free_for(p: usize, blob: u32, size: usize, water: &[bool], owner: &[u32]) -> bool {
    if water[p] || owner[p] != 0 {
        return false;
    }
    let (x, y) = ((p % size) as isize, (p / size) as isize);
    for dy in -1..=1 {
        for dx in -1..=1 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= size as isize || ny >= size as isize {
                continue;
            }
            let o = owner[ny as usize * size + nx as usize];
            if o != 0 && o != blob {
                return false;
            }
        }
    }
    true
}

fn grow(rng: &mut ChaCha8Rng, start: usize, area: usize, blob: u32, size: usize, water: &[bool], owner: &mut [u32]) -> usize {
    let (sx, sy) = ((start % size) as f64, (start / size) as f64);
    let mut frontier = BinaryHeap::new();
    frontier.push(Reverse((0u64, start)));
    let mut grown = 0;
    while let Some(Reverse((_, p))) = frontier.pop() {
        if grown == area {
            break;
        }
        if !free_for(p, blob, size, water, owner) {
            continue;
        }
        owner[p] = blob;
        grown += 1;
        let (x, y) = (p % size, p / size);
        let mut push = |nx: usize, ny: usize| {
            let q = ny * size + nx;
            if owner[q] == 0 {
                let d = ((nx as f64 - sx).powi(2) + (ny as f64 - sy).powi(2)).sqrt();
                let key = ((d + rng.random_range(0.0..1.5)) * 1e6) as u64;
                frontier.push(Reverse((key, q)));
            }
        };
        if x > 0 {
            push(x - 1, y);
        }
        if x + 1 < size {
            push(x + 1, y);
        }
        if y > 0 {
            push(x, y - 1);
        }
        if y + 1 < size {
            push(x, y + 1);
        }
    }
    grown
}

/// Separable [1, 2, 1] / 4 blur with edge clamping.
fn blur3(v: &[f32], size: usize) -> Vec<f32> {
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                let at = |d: isize| {
                    let (px, py) = if horizontal {
                        ((x as isize + d).clamp(0, size as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, size as isize - 1) as usize)
                    };
                    src[py * size + px]
                };
                (at(-1) + 2.0 * at(0) + at(1)) / 4.0
            })
            .collect()
    };
    pass(&pass(v, true), false)
}

/// Mean over a `(2r+1)^2` window, truncated at the edges.
fn box_blur(v: &[f32], size: usize, r: isize) -> Vec<f32> {
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as isize, (i / size) as isize);
            let mut s = 0.0;
            let mut c = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < size as isize && ny < size as isize {
                        s += v[ny as usize * size + nx as usize];
                        c += 1.0;
                    }
                }
            }
            s / c
        })
        .collect()
}
