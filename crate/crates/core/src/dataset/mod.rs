//! City samples, manifests and the raster pipeline that turns per-city exports
//! into fixed-size training pairs, plus a synthetic city generator.
//!
//! Files follow `<city-id>_<year>_<channel>.urg` with channel one of `ntl`, `dem`,
//! `water`, `builtup`, `population`. A manifest entry points at the `builtup`
//! file; the input channels are its siblings.

mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synth_city, WaterStyle, SYNTH_SIZES, SYNTH_YEAR};

use crate::error::{bail, Error, Result};
use crate::raster::{normalize, read_grid, resize, write_atomic, write_grid, Channel, Domain, Grid, ResizeMode, Stack};

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.01;
pub const DEFAULT_WINDOW_KM: f64 = 100.0;
/// Test cities at desk scale; 200 at full scale.
pub const DEFAULT_TEST_COUNT: usize = 20;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABEL_CHANNEL: &str = "builtup";

/// One city-year: aligned input layers and the binary built-up label.
#[derive(Debug, Clone, PartialEq)]
pub struct CitySample {
    pub id: String,
    pub year: i32,
    pub inputs: Stack,
    pub label: Grid,
    pub meters_per_pixel: f64,
    /// Total population, used as a constant input channel in physical-only mode.
    pub population: Option<f64>,
}

impl CitySample {
    pub fn new(
        id: impl Into<String>,
        year: i32,
        inputs: Stack,
        label: Grid,
        meters_per_pixel: f64,
        population: Option<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if label.domain() != Domain::Binary {
            bail!(Argument, "{id}: label must be binary");
        }
        if let Some(d) = inputs.dims() {
            if d != label.dims() {
                bail!(Shape, "{id}: inputs are {}x{}, label is {}x{}", d.0, d.1, label.width(), label.height());
            }
        }
        if !(meters_per_pixel > 0.0) {
            bail!(Argument, "{id}: meters_per_pixel must be positive");
        }
        if let Some(p) = population {
            if !(p >= 0.0) {
                bail!(Argument, "{id}: population must be non-negative");
            }
        }
        Ok(Self {
            id,
            year,
            inputs,
            label,
            meters_per_pixel,
            population,
        })
    }

    pub fn signal_fraction(&self) -> f64 {
        self.label.signal_fraction()
    }

    /// `<id>_<year>`, or just the id when it already ends in the year.
    pub fn file_stem(&self) -> String {
        let suffix = format!("_{}", self.year);
        if self.id.ends_with(&suffix) {
            self.id.clone()
        } else {
            format!("{}{suffix}", self.id)
        }
    }

    /// Writes every channel and the label into `dir`; returns the label path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.file_stem();
        for (ch, grid) in self.inputs.channels() {
            if ch == Channel::Noise {
                continue;
            }
            write_grid(grid, dir.join(format!("{stem}_{}.urg", ch.name())))?;
        }
        let label = dir.join(format!("{stem}_{LABEL_CHANNEL}.urg"));
        write_grid(&self.label, &label)?;
        Ok(label)
    }

    /// Loads a sample from its label file and the sibling channel files.
    /// `meters_per_pixel` is taken as a 100 km extent over the label width.
    pub fn load(label_path: &Path, id: &str, year: i32) -> Result<Self> {
        let label = read_grid(label_path)?;
        let stem = sibling_stem(label_path)?;
        let mut inputs = Stack::new();
        let mut population = None;
        for ch in [Channel::Ntl, Channel::Dem, Channel::Water, Channel::Population] {
            let p = stem.with_file_name(format!(
                "{}_{}.urg",
                stem.file_name().unwrap().to_string_lossy(),
                ch.name()
            ));
            if p.exists() {
                let g = read_grid(&p)?;
                if ch == Channel::Population {
                    population = Some(g.values().iter().map(|&v| v as f64).sum::<f64>().max(0.0));
                }
                inputs.insert(ch, g)?;
            }
        }
        let mpp = DEFAULT_WINDOW_KM * 1000.0 / label.width() as f64;
        Self::new(id, year, inputs, label, mpp, population)
    }
}

fn sibling_stem(label_path: &Path) -> Result<PathBuf> {
    let name = label_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let Some(stem) = name.strip_suffix(&format!("_{LABEL_CHANNEL}.urg")) else {
        bail!(Argument, "{} is not a *_{LABEL_CHANNEL}.urg file", label_path.display());
    };
    Ok(label_path.with_file_name(stem))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => bail!(Argument, "unknown split {s:?} (train|test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub year: i32,
    /// Label file, relative to the manifest's directory.
    pub path: String,
    pub split: Split,
    pub signal_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub filter_threshold: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                bail!(Format, "manifest lists {} twice", e.path);
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_sample(&self, manifest_dir: &Path, entry: &ManifestEntry) -> Result<CitySample> {
        CitySample::load(&manifest_dir.join(&entry.path), &entry.id, entry.year)
    }
}

/// Square window of side `round(window_km * 1000 / meters_per_pixel)` centred on
/// `(center_x, center_y)`; pixels outside the source are zero.
pub fn clip_window(source: &Grid, center_x: usize, center_y: usize, window_km: f64, meters_per_pixel: f64) -> Result<Grid> {
    if !(window_km > 0.0) || !(meters_per_pixel > 0.0) {
        bail!(Argument, "window ({window_km} km) and resolution ({meters_per_pixel} m) must be positive");
    }
    let side = (window_km * 1000.0 / meters_per_pixel).round();
    if side < 1.0 {
        bail!(Argument, "window of {window_km} km is under one pixel at {meters_per_pixel} m");
    }
    let side = side as usize;
    let x0 = center_x as isize - (side / 2) as isize;
    let y0 = center_y as isize - (side / 2) as isize;
    let (w, h) = source.dims();
    let mut values = vec![0.0f32; side * side];
    for y in 0..side {
        let sy = y0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..side {
            let sx = x0 + x as isize;
            if sx >= 0 && sx < w as isize {
                values[y * side + x] = source.get(sx as usize, sy as usize);
            }
        }
    }
    Grid::new(side, side, source.domain(), values)
}

/// Pixel of maximum value; ties go to the first in row-major order.
pub fn select_center(population: &Grid) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in population.values().iter().enumerate() {
        if v > population.values()[best] {
            best = i;
        }
    }
    (best % population.width(), best / population.width())
}

/// Keeps samples whose label has at least `threshold` bright pixels, in order.
pub fn filter_low_signal(samples: Vec<CitySample>, threshold: f64) -> Vec<CitySample> {
    samples.into_iter().filter(|s| s.signal_fraction() >= threshold).collect()
}

/// Concatenates the years in ascending order, suffixing each id with its year.
pub fn merge_years(per_year: BTreeMap<i32, Vec<CitySample>>) -> Vec<CitySample> {
    let single = per_year.len() == 1;
    let mut out = Vec::new();
    for (year, samples) in per_year {
        for mut s in samples {
            if !single {
                s.id = format!("{}_{year}", s.id);
            }
            out.push(s);
        }
    }
    out
}

/// Seeded train/test assignment. Entries come back sorted by `(id, year)` with
/// exactly `test_count` marked as test.
pub fn split_manifest(mut entries: Vec<ManifestEntry>, test_count: usize, seed: u64, filter_threshold: f64) -> Result<Manifest> {
    if test_count > entries.len() {
        bail!(Argument, "test count {test_count} exceeds {} samples", entries.len());
    }
    entries.sort_by(|a, b| (&a.id, a.year, &a.path).cmp(&(&b.id, b.year, &b.path)));
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for e in entries.iter_mut() {
        e.split = Split::Train;
    }
    for &i in &order[..test_count] {
        entries[i].split = Split::Test;
    }
    let m = Manifest {
        seed,
        filter_threshold,
        entries,
    };
    m.validate()?;
    Ok(m)
}

/// Parameters of [`build_manifest`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub window_km: f64,
    /// Ground resolution of the source rasters.
    pub meters_per_pixel: f64,
    /// Side of the processed samples.
    pub resolution: usize,
    pub filter_threshold: f64,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_km: DEFAULT_WINDOW_KM,
            meters_per_pixel: 781.25,
            resolution: 32,
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
            test_count: DEFAULT_TEST_COUNT,
            seed: 0,
        }
    }
}

/// Per-city exports found in a directory, keyed by `(city id, year)`.
fn scan_exports(input_dir: &Path) -> Result<BTreeMap<(String, i32), PathBuf>> {
    let rd = fs::read_dir(input_dir).map_err(|e| Error::io(input_dir, e))?;
    let mut found = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(input_dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let Some(stem) = name.strip_suffix(&format!("_{LABEL_CHANNEL}.urg")) else {
            continue;
        };
        let Some((id, year)) = stem.rsplit_once('_') else {
            warn!("skipping {name}: no year in file name");
            continue;
        };
        let Ok(year) = year.parse::<i32>() else {
            warn!("skipping {name}: year {year:?} is not an integer");
            continue;
        };
        found.insert((id.to_string(), year), path);
    }
    Ok(found)
}

fn process_city(label_path: &Path, id: &str, year: i32, cfg: &PipelineConfig) -> Result<Option<CitySample>> {
    let stem = sibling_stem(label_path)?;
    let channel_path = |ch: &str| {
        stem.with_file_name(format!("{}_{ch}.urg", stem.file_name().unwrap().to_string_lossy()))
    };
    for ch in [Channel::Ntl, Channel::Dem, Channel::Water] {
        if !channel_path(ch.name()).exists() {
            warn!("skipping {id} ({year}): missing {} channel", ch.name());
            return Ok(None);
        }
    }
    let label = read_grid(label_path)?;
    let pop_path = channel_path(Channel::Population.name());
    let population = if pop_path.exists() { Some(read_grid(&pop_path)?) } else { None };
    let (cx, cy) = match &population {
        Some(p) => select_center(p),
        None => (label.width() / 2, label.height() / 2),
    };
    let side = cfg.resolution;
    let clip = |g: &Grid| clip_window(g, cx, cy, cfg.window_km, cfg.meters_per_pixel);
    let binary = |g: &Grid| -> Result<Grid> {
        let g = clip(g)?;
        resize(&g, side, side, ResizeMode::Nearest)
    };
    let continuous = |g: &Grid| -> Result<Grid> {
        let g = normalize(&clip(g)?);
        resize(&g, side, side, ResizeMode::AreaAverage)
    };
    let mut inputs = Stack::new();
    inputs.insert(Channel::Ntl, continuous(&read_grid(channel_path("ntl"))?)?)?;
    inputs.insert(Channel::Dem, continuous(&read_grid(channel_path("dem"))?)?)?;
    inputs.insert(Channel::Water, binary(&read_grid(channel_path("water"))?)?)?;
    let mut total_pop = None;
    if let Some(p) = &population {
        let clipped = clip(p)?;
        total_pop = Some(clipped.values().iter().map(|&v| v.max(0.0) as f64).sum());
        let g = resize(&clipped.with_domain(Domain::Raw)?, side, side, ResizeMode::AreaAverage)?;
        inputs.insert(Channel::Population, g)?;
    }
    let label = binary(&label)?;
    let window_mpp = cfg.window_km * 1000.0 / side as f64;
    Ok(Some(CitySample::new(id, year, inputs, label, window_mpp, total_pop)?))
}

/// Clips, resizes and filters every city in `input_dir`, writes the processed
/// samples to `<manifest dir>/samples/` and the manifest to `manifest_path`.
pub fn build_manifest(input_dir: &Path, manifest_path: &Path, cfg: &PipelineConfig) -> Result<Manifest> {
    if cfg.resolution == 0 {
        bail!(Argument, "resolution must be positive");
    }
    let exports = scan_exports(input_dir)?;
    let mut per_year: BTreeMap<i32, Vec<CitySample>> = BTreeMap::new();
    for ((id, year), path) in &exports {
        if let Some(s) = process_city(path, id, *year, cfg)? {
            per_year.entry(*year).or_default().push(s);
        }
    }
    let merged = merge_years(per_year);
    let admitted = filter_low_signal(merged, cfg.filter_threshold);
    if admitted.is_empty() {
        bail!(Pipeline, "no admissible city samples in {}", input_dir.display());
    }
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let sample_dir = root.join("samples");
    let mut entries = Vec::with_capacity(admitted.len());
    for s in &admitted {
        let label = s.save(&sample_dir)?;
        entries.push(entry_for(s, &root, &label));
    }
    let test_count = capped_test_count(cfg.test_count, entries.len());
    let manifest = split_manifest(entries, test_count, cfg.seed, cfg.filter_threshold)?;
    manifest.save(manifest_path)?;
    Ok(manifest)
}

fn capped_test_count(requested: usize, available: usize) -> usize {
    if requested > available {
        warn!("only {available} samples; test split reduced from {requested}");
    }
    requested.min(available)
}

fn entry_for(s: &CitySample, root: &Path, label: &Path) -> ManifestEntry {
    let rel = label.strip_prefix(root).unwrap_or(label);
    ManifestEntry {
        id: s.id.clone(),
        year: s.year,
        path: rel.to_string_lossy().replace('\\', "/"),
        split: Split::Train,
        signal_fraction: s.signal_fraction(),
    }
}

/// Writes `count` synthetic cities and a manifest into `out_dir`.
pub fn write_synth_corpus(
    out_dir: &Path,
    count: usize,
    size: usize,
    water: WaterStyle,
    seed: u64,
    test_count: usize,
) -> Result<Manifest> {
    if !SYNTH_SIZES.contains(&size) {
        bail!(Argument, "synthetic size must be one of {SYNTH_SIZES:?}, got {size}");
    }
    if count == 0 {
        bail!(Argument, "count must be at least 1");
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let style = water.for_index(i);
        let mut s = synth_city(derive_seed(seed, i as u64), size, style)?;
        s.id = format!("synth{i:04}");
        let label = s.save(out_dir)?;
        entries.push(entry_for(&s, out_dir, &label));
    }
    let admitted: Vec<ManifestEntry> = entries
        .into_iter()
        .filter(|e| e.signal_fraction >= DEFAULT_FILTER_THRESHOLD)
        .collect();
    if admitted.is_empty() {
        bail!(Pipeline, "no synthetic city passed the signal filter");
    }
    let test_count = capped_test_count(test_count, admitted.len());
    let manifest = split_manifest(admitted, test_count, seed, DEFAULT_FILTER_THRESHOLD)?;
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Decorrelated child seed (SplitMix64 finalizer of `base` and `salt`).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
