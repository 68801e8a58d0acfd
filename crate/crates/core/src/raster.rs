//! Single-channel rasters, the URG1 file format, resampling and value-domain
//! conversions shared by the dataset pipeline, the trainer and the metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

pub const URG_MAGIC: &[u8; 4] = b"URG1";
pub const URG_HEADER_LEN: usize = 13;

/// Value domain of a [`Grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Binary,
    UnitInterval,
    Raw,
}

impl Domain {
    fn code(self) -> u8 {
        match self {
            Domain::Binary => 0,
            Domain::UnitInterval => 1,
            Domain::Raw => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Domain::Binary),
            1 => Some(Domain::UnitInterval),
            2 => Some(Domain::Raw),
            _ => None,
        }
    }
}

/// Row-major single-channel raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    domain: Domain,
    values: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, domain: Domain, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Shape, "grid dimensions must be positive, got {width}x{height}");
        }
        if values.len() != width * height {
            bail!(
                Shape,
                "grid {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            );
        }
        match domain {
            Domain::Binary => {
                if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    bail!(Argument, "binary grid holds non-binary value {v}");
                }
            }
            Domain::UnitInterval => {
                if let Some(v) = values.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                    bail!(Argument, "unit-interval grid holds out-of-range value {v}");
                }
            }
            Domain::Raw => {}
        }
        Ok(Self {
            width,
            height,
            domain,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, domain: Domain) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be positive");
        Self {
            width,
            height,
            domain,
            values: vec![0.0; width * height],
        }
    }

    /// Binary grid from a predicate over `(x, y)`.
    pub fn from_fn_binary(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut g = Self::zeros(width, height, Domain::Binary);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    g.values[y * width + x] = 1.0;
                }
            }
        }
        g
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// The peak value used by PSNR.
    pub fn max_value(&self) -> f64 {
        match self.domain {
            Domain::Binary | Domain::UnitInterval => 1.0,
            Domain::Raw => {
                let m = self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
                if m > 0.0 {
                    m as f64
                } else {
                    1.0
                }
            }
        }
    }

    /// Number of pixels with value 1 (or, for non-binary grids, value > 0.5).
    pub fn bright_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn signal_fraction(&self) -> f64 {
        self.bright_count() as f64 / self.len() as f64
    }

    /// Reinterpret the same values under another domain, validating the invariants.
    pub fn with_domain(self, domain: Domain) -> Result<Self> {
        Self::new(self.width, self.height, domain, self.values)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid({}x{}, {:?})", self.width, self.height, self.domain)
    }
}

/// Input channel names of a city stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Ntl,
    Dem,
    Water,
    Population,
    Noise,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Ntl => "ntl",
            Channel::Dem => "dem",
            Channel::Water => "water",
            Channel::Population => "population",
            Channel::Noise => "noise",
        }
    }
}

/// Aligned input layers of one city.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stack {
    channels: BTreeMap<Channel, Grid>,
}

impl Stack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, channel: Channel, grid: Grid) -> Result<()> {
        if let Some((_, first)) = self.channels.iter().find(|(c, _)| **c != channel) {
            if first.dims() != grid.dims() {
                bail!(
                    Shape,
                    "channel {} is {}x{}, stack is {}x{}",
                    channel.name(),
                    grid.width(),
                    grid.height(),
                    first.width(),
                    first.height()
                );
            }
        }
        if channel == Channel::Water && grid.domain() != Domain::Binary {
            bail!(Argument, "water channel must be binary");
        }
        self.channels.insert(channel, grid);
        Ok(())
    }

    pub fn get(&self, channel: Channel) -> Option<&Grid> {
        self.channels.get(&channel)
    }

    pub fn channels(&self) -> impl Iterator<Item = (Channel, &Grid)> {
        self.channels.iter().map(|(c, g)| (*c, g))
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.channels.values().next().map(Grid::dims)
    }
}

// ---------------------------------------------------------------------------
// URG1 I/O

pub fn encode_grid(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(URG_HEADER_LEN + grid.len() * 4);
    out.extend_from_slice(URG_MAGIC);
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.push(grid.domain.code());
    match grid.domain {
        Domain::Binary => out.extend(grid.values.iter().map(|&v| v as u8)),
        Domain::UnitInterval | Domain::Raw => {
            for v in &grid.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_grid(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < URG_HEADER_LEN {
        bail!(Format, "file shorter than the {URG_HEADER_LEN}-byte URG1 header");
    }
    if &bytes[..4] != URG_MAGIC {
        bail!(Format, "bad magic {:?}, expected URG1", &bytes[..4]);
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let domain = Domain::from_code(bytes[12])
        .ok_or_else(|| Error::Format(format!("unknown domain code {}", bytes[12])))?;
    if width == 0 || height == 0 {
        bail!(Format, "zero dimension in header ({width}x{height})");
    }
    let payload = &bytes[URG_HEADER_LEN..];
    let n = width * height;
    let per_pixel = if domain == Domain::Binary { 1 } else { 4 };
    if payload.len() != n * per_pixel {
        return Err(Error::Truncated {
            expected: n * per_pixel,
            found: payload.len(),
        });
    }
    let values = match domain {
        Domain::Binary => payload.iter().map(|&b| b as f32).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Grid::new(width, height, domain, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_grid(grid))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Binary greyscale (P5) image, values scaled to 0..=255 with round-half-up.
pub fn encode_pgm(grid: &Grid) -> Result<Vec<u8>> {
    if grid.domain == Domain::Raw {
        bail!(Argument, "PGM export needs a binary or unit-interval grid");
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(grid.values.iter().map(|&v| pgm_byte(v)));
    Ok(out)
}

fn pgm_byte(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn export_pgm(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(grid)?)
}

// ---------------------------------------------------------------------------
// Resampling and value-domain conversions

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    AreaAverage,
}

pub fn resize(grid: &Grid, new_w: usize, new_h: usize, mode: ResizeMode) -> Result<Grid> {
    if new_w == 0 || new_h == 0 {
        bail!(Argument, "resize target must be at least 1x1, got {new_w}x{new_h}");
    }
    if grid.dims() == (new_w, new_h) {
        return Ok(grid.clone());
    }
    match mode {
        ResizeMode::Nearest => {
            let xs: Vec<usize> = (0..new_w).map(|i| nearest_src(i, grid.width, new_w)).collect();
            let ys: Vec<usize> = (0..new_h).map(|j| nearest_src(j, grid.height, new_h)).collect();
            let mut values = Vec::with_capacity(new_w * new_h);
            for &sy in &ys {
                values.extend(xs.iter().map(|&sx| grid.get(sx, sy)));
            }
            Ok(Grid {
                width: new_w,
                height: new_h,
                domain: grid.domain,
                values,
            })
        }
        ResizeMode::AreaAverage => {
            let wx = area_weights(grid.width, new_w);
            let wy = area_weights(grid.height, new_h);
            let mut values = Vec::with_capacity(new_w * new_h);
            for row in &wy {
                for col in &wx {
                    let mut acc = 0.0f64;
                    for &(sy, ay) in row {
                        for &(sx, ax) in col {
                            acc += ay * ax * grid.get(sx, sy) as f64;
                        }
                    }
                    values.push(acc as f32);
                }
            }
            let domain = match grid.domain {
                Domain::Raw => Domain::Raw,
                _ => Domain::UnitInterval,
            };
            if domain == Domain::UnitInterval {
                for v in &mut values {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            Ok(Grid {
                width: new_w,
                height: new_h,
                domain,
                values,
            })
        }
    }
}

fn nearest_src(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// For each output index, the contributing source indices and their overlap weights
/// (summing to one).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let mut out = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src {
                let overlap = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                if overlap > 0.0 {
                    out.push((s, overlap / scale));
                }
                s += 1;
            }
            out
        })
        .collect()
}

/// Affine rescale to [0, 1]; constant grids map to all zeros, non-finite values to 0.
pub fn normalize(grid: &Grid) -> Grid {
    let (lo, hi) = grid
        .values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi as f64 - lo as f64;
    let values = grid
        .values
        .iter()
        .map(|&v| {
            if !v.is_finite() || !(range > 0.0) {
                0.0
            } else {
                (((v as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0)
            }
        })
        .collect();
    Grid {
        width: grid.width,
        height: grid.height,
        domain: Domain::UnitInterval,
        values,
    }
}

pub const DEFAULT_THRESHOLD: f32 = 0.9;

/// Pixel is 1 iff value >= threshold.
pub fn binarize(grid: &Grid, threshold: f32) -> Result<Grid> {
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Argument, "threshold {threshold} outside (0, 1)");
    }
    if grid.domain == Domain::Raw {
        bail!(Argument, "binarize needs a unit-interval grid");
    }
    Ok(Grid {
        width: grid.width,
        height: grid.height,
        domain: Domain::Binary,
        values: grid
            .values
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
    })
}
