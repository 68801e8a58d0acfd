//! im2col-based 2-D cross-correlation.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `(C, H, W)` into a `(C·kh·kw, out_h·out_w)` matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.in_ch {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * cols;
    let mut out = vec![T::zero(); g.batch * out_size];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for b in 0..g.batch {
        let img = &input[b * in_size..(b + 1) * in_size];
        let col_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut col);
            &col
        };
        let dst = &mut out[b * out_size..(b + 1) * out_size];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
        }
        T::gemm(
            g.out_ch,
            rows,
            cols,
            kernel,
            (rows as isize, 1),
            col_ref,
            (cols as isize, 1),
            dst,
            bias.is_some(),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    upstream: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_size = g.in_ch * g.in_h * g.in_w;
    let out_size = g.out_ch * cols;
    let mut d_input = want.0.then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = want.1.then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = want.2.then(|| vec![T::zero(); g.out_ch]);
    let mut col = vec![T::zero(); rows * cols];
    let mut d_col = vec![T::zero(); rows * cols];
    for b in 0..g.batch {
        let gout = &upstream[b * out_size..(b + 1) * out_size];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in gout.chunks_exact(cols).enumerate() {
                db[o] += chunk.iter().copied().sum::<T>();
            }
        }
        let img = &input[b * in_size..(b + 1) * in_size];
        if let Some(dk) = d_kernel.as_mut() {
            let col_ref: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            // dK (O × R) += gout (O × P) · colᵀ (P × R)
            T::gemm(
                g.out_ch,
                cols,
                rows,
                gout,
                (cols as isize, 1),
                col_ref,
                (1, cols as isize),
                dk,
                true,
            );
        }
        if let Some(di) = d_input.as_mut() {
            let dst = &mut di[b * in_size..(b + 1) * in_size];
            if g.is_pointwise() {
                // dX (R × P) += Kᵀ (R × O) · gout (O × P)
                T::gemm(
                    rows,
                    g.out_ch,
                    cols,
                    kernel,
                    (1, rows as isize),
                    gout,
                    (cols as isize, 1),
                    dst,
                    true,
                );
            } else {
                T::gemm(
                    rows,
                    g.out_ch,
                    cols,
                    kernel,
                    (1, rows as isize),
                    gout,
                    (cols as isize, 1),
                    &mut d_col,
                    false,
                );
                col2im(g, &d_col, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}
