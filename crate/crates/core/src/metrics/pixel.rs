use serde::{Serialize, Serializer};

use crate::error::{bail, Result};
use crate::raster::Grid;

/// Peak signal-to-noise ratio; identical grids give the infinite marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v}"),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_str("inf"),
        }
    }
}

fn check_dims(a: &Grid, b: &Grid) -> Result<()> {
    if a.dims() != b.dims() {
        bail!(
            Shape,
            "grids differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        );
    }
    Ok(())
}

pub fn mse(a: &Grid, b: &Grid) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn psnr(a: &Grid, b: &Grid) -> Result<Psnr> {
    if a.max_value() != b.max_value() {
        bail!(Argument, "psnr needs a shared peak value, got {} and {}", a.max_value(), b.max_value());
    }
    Ok(psnr_from_mse(mse(a, b)?, a.max_value()))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (max_value * max_value / mse).log10())
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn ssim_term(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

/// Mean structural similarity over all fully contained 11x11 Gaussian windows.
/// Grids smaller than the window are scored with one uniform global window.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    let av: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
    let bv: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        let n = av.len() as f64;
        let ma = av.iter().sum::<f64>() / n;
        let mb = bv.iter().sum::<f64>() / n;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for (x, y) in av.iter().zip(&bv) {
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
            cov += (x - ma) * (y - mb);
        }
        return Ok(ssim_term(ma, mb, va / n, vb / n, cov / n));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (y0 + dy) * w + x0;
                for (dx, gx) in g.iter().enumerate() {
                    let wt = gy * gx;
                    let x = av[row + dx];
                    let y = bv[row + dx];
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            total += ssim_term(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            count += 1;
        }
    }
    Ok(total / count as f64)
}
