use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::raster::Grid;

/// Which pixels the box counter covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FractalMode {
    /// Every bright pixel.
    #[default]
    Filled,
    /// Bright pixels with at least one dark 4-neighbour; off-grid counts as dark.
    Boundary,
}

impl FractalMode {
    pub fn name(self) -> &'static str {
        match self {
            FractalMode::Filled => "filled",
            FractalMode::Boundary => "boundary",
        }
    }
}

impl std::str::FromStr for FractalMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filled" => Ok(FractalMode::Filled),
            "boundary" => Ok(FractalMode::Boundary),
            _ => bail!(Argument, "unknown fractal mode {s:?} (filled|boundary)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxCountCurve {
    /// `(box side, occupied boxes)` for increasing box sides.
    pub points: Vec<(usize, usize)>,
    pub dimension: f64,
}

/// Box-counting dimension with box sides `1, 2, 4, ..., side/2`.
/// `None` for a grid without bright pixels.
pub fn fractal_dimension(city: &Grid, mode: FractalMode) -> Option<BoxCountCurve> {
    fractal_dimension_with_base(city, mode, 2)
}

/// Box counting with box sides `base^k`; the grid is zero-padded to a square whose
/// side is the smallest power of `base` covering it, and boxes are anchored at the origin.
pub fn fractal_dimension_with_base(city: &Grid, mode: FractalMode, base: usize) -> Option<BoxCountCurve> {
    assert!(base >= 2, "box base must be at least 2");
    let (w, h) = city.dims();
    let bright = |x: usize, y: usize| city.get(x, y) > 0.5;
    let selected: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| bright(x, y))
        .filter(|&(x, y)| match mode {
            FractalMode::Filled => true,
            FractalMode::Boundary => {
                x == 0 || y == 0 || x + 1 == w || y + 1 == h || {
                    !bright(x - 1, y) || !bright(x + 1, y) || !bright(x, y - 1) || !bright(x, y + 1)
                }
            }
        })
        .collect();
    if selected.is_empty() {
        return None;
    }
    let mut side = 1;
    while side < w.max(h) {
        side *= base;
    }
    let mut points = Vec::new();
    let mut eps = 1;
    loop {
        let cells = side / eps;
        let mut occupied = vec![false; cells * cells];
        for &(x, y) in &selected {
            occupied[(y / eps) * cells + x / eps] = true;
        }
        points.push((eps, occupied.iter().filter(|&&o| o).count()));
        if eps * base > side / base {
            break;
        }
        eps *= base;
    }
    let xs: Vec<f64> = points.iter().map(|&(e, _)| -(e as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, n)| (n as f64).ln()).collect();
    let dimension = ols(&xs, &ys).map_or(0.0, |f| f.slope);
    Some(BoxCountCurve { points, dimension })
}

/// Sizes of maximal connected bright regions, in order of each region's first
/// pixel in row-major scan.
pub fn connected_components(city: &Grid, connectivity: u8) -> Result<Vec<usize>> {
    let offsets: &[(isize, isize)] = match connectivity {
        4 => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        8 => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
        c => bail!(Argument, "connectivity must be 4 or 8, got {c}"),
    };
    let (w, h) = city.dims();
    let mut seen = vec![false; w * h];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if seen[start] || city.values()[start] <= 0.5 {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && city.values()[q] > 0.5 {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        sizes.push(size);
    }
    Ok(sizes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZipfFit {
    pub gamma: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_bins: usize,
}

/// Power-law fit `ln P(S) = gamma ln S + C` on power-of-two bins of the size
/// histogram. Each bin's probability density divides its share of the sizes by
/// the width spanned by the sizes observed in it, and is placed at the geometric
/// mean of that span. `None` with fewer than three non-empty bins.
pub fn zipf_fit(sizes: &[usize]) -> Option<ZipfFit> {
    let mut bins: BTreeMap<u32, (usize, usize, usize)> = BTreeMap::new();
    for &s in sizes.iter().filter(|&&s| s > 0) {
        let e = bins.entry(s.ilog2()).or_insert((0, s, s));
        e.0 += 1;
        e.1 = e.1.min(s);
        e.2 = e.2.max(s);
    }
    if bins.len() < 3 {
        return None;
    }
    let total: usize = bins.values().map(|b| b.0).sum();
    let (xs, ys): (Vec<f64>, Vec<f64>) = bins
        .values()
        .map(|&(count, lo, hi)| {
            let width = (hi - lo + 1) as f64;
            let at = ((lo as f64) * (hi as f64)).sqrt();
            (at.ln(), (count as f64 / total as f64 / width).ln())
        })
        .unzip();
    let fit = ols(&xs, &ys)?;
    Some(ZipfFit {
        gamma: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        n_bins: bins.len(),
    })
}

pub(crate) struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope x + intercept`; `None` when x has no spread.
pub(crate) fn ols(xs: &[f64], ys: &[f64]) -> Option<LinearFit> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
