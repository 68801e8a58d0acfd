//! Evaluation of generated cities against their labels at four levels: pixel
//! (MSE, PSNR), multi-scale spatial (pyramid matching), perceptual (SSIM) and
//! macroscopic (box-counting dimension, settlement-size power law).
//!
//! Undefined values are `None` and never enter an aggregate; CSV output writes
//! them as `NA`.

mod macroscopic;
mod pixel;
mod spm;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use macroscopic::{
    connected_components, fractal_dimension, fractal_dimension_with_base, zipf_fit, BoxCountCurve, FractalMode,
    ZipfFit,
};
pub use pixel::{mse, psnr, psnr_from_mse, ssim, Psnr, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
pub use spm::{default_levels, intersections, pyramid_kernel, spm_score, PyramidHistogram};

use crate::error::{bail, Result};
use crate::raster::Grid;

/// Settlement connectivity used for the size distribution.
pub const SETTLEMENT_CONNECTIVITY: u8 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Pyramid depth; `None` picks `log2(side) - 2`.
    pub spm_levels: Option<usize>,
    pub fractal_mode: FractalMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            spm_levels: None,
            fractal_mode: FractalMode::Filled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub mse: f64,
    pub psnr: Psnr,
    pub spm: Option<f64>,
    pub ssim: f64,
    pub fractal_label: Option<f64>,
    pub fractal_generated: Option<f64>,
    pub zipf_gamma_label: Option<f64>,
    pub zipf_gamma_generated: Option<f64>,
}

pub fn evaluate_pair(id: &str, generated: &Grid, label: &Grid, opts: &EvalOptions) -> Result<MetricRow> {
    if generated.dims() != label.dims() {
        bail!(
            Shape,
            "{id}: generated {}x{} vs label {}x{}",
            generated.width(),
            generated.height(),
            label.width(),
            label.height()
        );
    }
    let levels = opts.spm_levels.unwrap_or_else(|| default_levels(label.width()));
    let cells = 1usize.checked_shl(levels as u32).filter(|&c| c > 0 && label.width() % c == 0 && label.height() % c == 0);
    if cells.is_none() {
        bail!(Argument, "{levels} pyramid levels do not fit a {}x{} grid", label.width(), label.height());
    }
    let dim = |g: &Grid| fractal_dimension(g, opts.fractal_mode).map(|c| c.dimension);
    let gamma = |g: &Grid| -> Result<Option<f64>> {
        Ok(zipf_fit(&connected_components(g, SETTLEMENT_CONNECTIVITY)?).map(|f| f.gamma))
    };
    let m = mse(generated, label)?;
    Ok(MetricRow {
        id: id.to_string(),
        mse: m,
        psnr: psnr(generated, label)?,
        spm: spm_score(generated, label, levels)?,
        ssim: ssim(generated, label)?,
        fractal_label: dim(label),
        fractal_generated: dim(generated),
        zipf_gamma_label: gamma(label)?,
        zipf_gamma_generated: gamma(generated)?,
    })
}

/// Means over defined values, with the number of values each mean is taken over.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub rows: usize,
    pub mse: Option<f64>,
    /// Mean over finite values; infinite when every row is infinite.
    pub psnr: Option<Psnr>,
    pub psnr_infinite: usize,
    pub spm: Option<f64>,
    pub spm_defined: usize,
    pub ssim: Option<f64>,
    pub fractal_label: Option<f64>,
    pub fractal_generated: Option<f64>,
    pub zipf_gamma_label: Option<f64>,
    pub zipf_gamma_generated: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (s, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| s / n as f64), n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FractalValidation {
    pub pearson_r: Option<f64>,
    pub mape: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        Self { rows }
    }

    pub fn aggregate(&self) -> Aggregate {
        let r = &self.rows;
        let finite: Vec<f64> = r.iter().filter_map(|x| x.psnr.finite()).collect();
        let psnr = if r.is_empty() {
            None
        } else if finite.is_empty() {
            Some(Psnr::Infinite)
        } else {
            Some(Psnr::Finite(finite.iter().sum::<f64>() / finite.len() as f64))
        };
        let (spm, spm_defined) = mean_defined(r.iter().map(|x| x.spm));
        Aggregate {
            rows: r.len(),
            mse: mean_defined(r.iter().map(|x| Some(x.mse))).0,
            psnr,
            psnr_infinite: r.len() - finite.len(),
            spm,
            spm_defined,
            ssim: mean_defined(r.iter().map(|x| Some(x.ssim))).0,
            fractal_label: mean_defined(r.iter().map(|x| x.fractal_label)).0,
            fractal_generated: mean_defined(r.iter().map(|x| x.fractal_generated)).0,
            zipf_gamma_label: mean_defined(r.iter().map(|x| x.zipf_gamma_label)).0,
            zipf_gamma_generated: mean_defined(r.iter().map(|x| x.zipf_gamma_generated)).0,
        }
    }

    pub fn fractal_validation(&self) -> Option<FractalValidation> {
        fractal_validation(&self.rows)
    }
}

/// Pearson correlation and mean absolute percentage error between label and
/// generated box-counting dimensions, over rows where both are defined.
pub fn fractal_validation(rows: &[MetricRow]) -> Option<FractalValidation> {
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.fractal_label?, r.fractal_generated?)))
        .collect();
    if pairs.len() < 3 {
        return None;
    }
    let labels: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let gens: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pct: Vec<f64> = pairs.iter().filter(|p| p.0 != 0.0).map(|p| ((p.1 - p.0) / p.0).abs()).collect();
    if pct.is_empty() {
        return None;
    }
    Some(FractalValidation {
        pearson_r: pearson(&labels, &gens),
        mape: pct.iter().sum::<f64>() / pct.len() as f64,
        n: pairs.len(),
    })
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn psnr_cell(v: Option<Psnr>) -> String {
    v.map_or_else(|| "NA".to_string(), |p| p.to_string())
}

pub const REPORT_COLUMNS: &str =
    "id,mse,psnr,spm,ssim,fractal_label,fractal_generated,zipf_gamma_label,zipf_gamma_generated";

/// Per-city rows followed by a `mean` row. The first line is a `#` comment
/// recording the options the report was computed with.
pub fn report_csv(report: &MetricReport, opts: &EvalOptions) -> String {
    let mut out = String::new();
    let levels = opts.spm_levels.map_or_else(|| "auto".to_string(), |l| l.to_string());
    writeln!(out, "# fractal_mode={} spm_levels={levels}", opts.fractal_mode.name()).unwrap();
    writeln!(out, "{REPORT_COLUMNS}").unwrap();
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.id,
            r.mse,
            r.psnr,
            cell(r.spm),
            r.ssim,
            cell(r.fractal_label),
            cell(r.fractal_generated),
            cell(r.zipf_gamma_label),
            cell(r.zipf_gamma_generated)
        )
        .unwrap();
    }
    let a = report.aggregate();
    writeln!(
        out,
        "mean,{},{},{},{},{},{},{},{}",
        cell(a.mse),
        psnr_cell(a.psnr),
        cell(a.spm),
        cell(a.ssim),
        cell(a.fractal_label),
        cell(a.fractal_generated),
        cell(a.zipf_gamma_label),
        cell(a.zipf_gamma_generated)
    )
    .unwrap();
    out
}

/// Label vs generated box-counting dimension per city.
pub fn fractal_csv(report: &MetricReport) -> String {
    let mut out = String::from("id,fractal_label,fractal_generated\n");
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.id, cell(r.fractal_label), cell(r.fractal_generated)).unwrap();
    }
    out
}

/// Fitted settlement-size exponents per city.
pub fn zipf_csv(report: &MetricReport) -> String {
    let mut out = String::from("id,zipf_gamma_label,zipf_gamma_generated\n");
    for r in &report.rows {
        writeln!(out, "{},{},{}", r.id, cell(r.zipf_gamma_label), cell(r.zipf_gamma_generated)).unwrap();
    }
    out
}
