use crate::error::{bail, Result};
use crate::raster::Grid;

/// Bright-pixel counts on nested grids: level `l` has `2^l x 2^l` cells, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidHistogram {
    pub levels: Vec<Vec<u32>>,
    pub total: u32,
}

impl PyramidHistogram {
    pub fn build(grid: &Grid, depth: usize) -> Result<Self> {
        let (w, h) = grid.dims();
        if w != h {
            bail!(Shape, "pyramid needs a square grid, got {w}x{h}");
        }
        let cells = 1usize << depth;
        if w % cells != 0 {
            bail!(Shape, "side {w} not divisible by 2^{depth}");
        }
        // finest level first, then merge children upwards
        let cell = w / cells;
        let mut finest = vec![0u32; cells * cells];
        for y in 0..h {
            for x in 0..w {
                if grid.get(x, y) > 0.5 {
                    finest[(y / cell) * cells + x / cell] += 1;
                }
            }
        }
        let mut levels = vec![finest];
        for l in (0..depth).rev() {
            let n = 1usize << l;
            let child = levels.last().unwrap();
            let mut parent = vec![0u32; n * n];
            for cy in 0..2 * n {
                for cx in 0..2 * n {
                    parent[(cy / 2) * n + cx / 2] += child[cy * 2 * n + cx];
                }
            }
            levels.push(parent);
        }
        levels.reverse();
        let total = levels[0][0];
        Ok(Self { levels, total })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }
}

/// Histogram intersections `I^0..=I^L`.
pub fn intersections(x: &PyramidHistogram, y: &PyramidHistogram) -> Vec<u32> {
    x.levels
        .iter()
        .zip(&y.levels)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p.min(q)).sum())
        .collect()
}

/// `K = I^L + sum_{l=1}^{L-1} (I^l - I^{l+1}) / 2^{L-l}`.
pub fn pyramid_kernel(i: &[u32]) -> f64 {
    let depth = i.len() - 1;
    let mut k = i[depth] as f64;
    for l in 1..depth {
        k += (i[l] as f64 - i[l + 1] as f64) / (1u64 << (depth - l)) as f64;
    }
    k
}

/// Pyramid match score normalized by the larger bright-pixel count and scaled to
/// [0, 100]. `None` when neither grid has a bright pixel.
pub fn spm_score(x: &Grid, y: &Grid, depth: usize) -> Result<Option<f64>> {
    if x.dims() != y.dims() {
        bail!(Shape, "spm grids differ in size");
    }
    let hx = PyramidHistogram::build(x, depth)?;
    let hy = PyramidHistogram::build(y, depth)?;
    let n = hx.total.max(hy.total);
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(100.0 * pyramid_kernel(&intersections(&hx, &hy)) / n as f64))
}

/// Default pyramid depth for a square side: `log2(side) - 2`, at least 0.
pub fn default_levels(side: usize) -> usize {
    (side.max(1).ilog2() as usize).saturating_sub(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(side: usize, p: &[(usize, usize)]) -> Grid {
        Grid::from_fn_binary(side, side, |x, y| p.contains(&(x, y)))
    }

    #[test]
    fn half_match_example() {
        let x = pts(4, &[(0, 0), (3, 3)]);
        let y = pts(4, &[(0, 0), (0, 3)]);
        let hx = PyramidHistogram::build(&x, 2).unwrap();
        let hy = PyramidHistogram::build(&y, 2).unwrap();
        assert_eq!(intersections(&hx, &hy), vec![2, 1, 1]);
        assert_eq!(spm_score(&x, &y, 2).unwrap(), Some(50.0));
    }

    #[test]
    fn self_match_is_100() {
        let x = Grid::from_fn_binary(16, 16, |x, y| (x * y) % 5 == 1);
        for l in 0..=4 {
            assert_eq!(spm_score(&x, &x, l).unwrap(), Some(100.0));
        }
    }

    #[test]
    fn disjoint_cells_score_zero() {
        let x = pts(4, &[(0, 0)]);
        let y = pts(4, &[(3, 3)]);
        assert_eq!(spm_score(&x, &y, 2).unwrap(), Some(0.0));
    }

    #[test]
    fn empty_pair_is_undefined() {
        let e = pts(4, &[]);
        assert_eq!(spm_score(&e, &e, 2).unwrap(), None);
    }

    #[test]
    fn histogram_refines() {
        let x = Grid::from_fn_binary(8, 8, |x, y| (x + 2 * y) % 3 == 0);
        let h = PyramidHistogram::build(&x, 3).unwrap();
        for lvl in &h.levels {
            assert_eq!(lvl.iter().sum::<u32>(), h.total);
        }
        assert_eq!(h.total as usize, x.bright_count());
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Grid::from_fn_binary(6, 6, |_, _| true);
        assert!(spm_score(&x, &x, 2).is_err());
        let r = Grid::from_fn_binary(8, 4, |_, _| true);
        assert!(spm_score(&r, &r, 1).is_err());
    }

    #[test]
    fn default_levels_by_side() {
        assert_eq!(default_levels(32), 3);
        assert_eq!(default_levels(128), 5);
        assert_eq!(default_levels(4), 0);
    }
}
