use super::conv::{self, ConvGeom};
use super::tape::{Node, Tape, Var};
use super::{dims4, Real};
use crate::error::{bail, Result};

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    BatchNorm {
        input: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Mix {
        a: Var,
        b: Var,
        alpha: T,
    },
    MeanSpatial(Var),
    SpectralNorm {
        kernel: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
        clamped: bool,
    },
    L1Mean(Var, Var),
    WeightedMean {
        input: Var,
        weights: Vec<T>,
    },
    HalfSquaredError {
        input: Var,
        target: T,
    },
}

/// Batch statistics computed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

impl<T: Real> Tape<T> {
    /// Cross-correlation of `(B, C, H, W)` input with an `(O, C, kh, kw)` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (batch, in_ch, in_h, in_w) = dims4(self.shape(input))?;
        let (out_ch, k_ch, kh, kw) = dims4(self.shape(kernel))?;
        if stride == 0 {
            bail!(Argument, "conv2d stride must be at least 1");
        }
        if k_ch != in_ch {
            bail!(Shape, "kernel expects {k_ch} input channels, input has {in_ch}");
        }
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                bail!(Shape, "bias shape {:?} does not match {out_ch} outputs", self.shape(b));
            }
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            bail!(Shape, "kernel {kh}x{kw} larger than padded input {in_h}x{in_w}");
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            pad: padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        };
        let out = conv::forward(
            &geom,
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
        );
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_requires_grad(&deps);
        Ok(self.push(
            vec![batch, out_ch, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Nearest-neighbour 2x upsampling of both spatial dimensions.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        let src = self.value(input);
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = plane[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![b, c, 2 * h, 2 * w], out, rg, Op::Upsample2x(input)))
    }

    /// 2x2 average pooling; spatial dimensions must be even.
    pub fn downsample2x_avg(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            bail!(Shape, "downsample2x needs even spatial dims, got {h}x{w}");
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(input);
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let s = plane[2 * y * w + 2 * x]
                        + plane[2 * y * w + 2 * x + 1]
                        + plane[(2 * y + 1) * w + 2 * x]
                        + plane[(2 * y + 1) * w + 2 * x + 1];
                    out[p * oh * ow + y * ow + x] = s * quarter;
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(vec![b, c, oh, ow], out, rg, Op::Downsample2x(input)))
    }

    fn unary(&mut self, input: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out: Vec<T> = self.value(input).iter().map(|&x| f(x)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires_grad(input);
        self.push(shape, out, rg, op)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |x| x.max(T::zero()), Op::Relu(input))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: T) -> Var {
        self.unary(
            input,
            |x| if x > T::zero() { x } else { x * slope },
            Op::LeakyRelu(input, slope),
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid, Op::Sigmoid(input))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        self.unary(input, |x| x * factor, Op::Scale(input, factor))
    }

    /// Per-channel normalization. With `stats = None` the batch statistics are used
    /// (and returned); otherwise the supplied `(mean, var)` are applied as constants.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gain: Var,
        shift: Var,
        stats: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            bail!(Shape, "batch norm gain/shift must have shape [{c}]");
        }
        let hw = h * w;
        let count = b * hw;
        let x = self.value(input);
        let (mean, var, batch) = match stats {
            None => {
                if b < 2 {
                    bail!(Argument, "batch norm in train mode needs batch >= 2, got {b}");
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..b {
                        s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let m = s / n;
                    let mut v = T::zero();
                    for bi in 0..b {
                        for &xv in &x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                            v += (xv - m) * (xv - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / n;
                }
                (mean, var, true)
            }
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    bail!(Shape, "running statistics must have {c} entries");
                }
                (m.to_vec(), v.to_vec(), false)
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gain);
        let s = self.value(shift);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean[ch]) * invstd[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + s[ch];
                }
            }
        }
        let rg = self.any_requires_grad(&[input, gain, shift]);
        let var_node = self.push(
            vec![b, c, h, w],
            out,
            rg,
            Op::BatchNorm {
                input,
                gain,
                shift,
                xhat,
                invstd,
                batch_stats: batch,
            },
        );
        Ok((var_node, batch.then_some(BatchStats { mean, var, count })))
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = dims4(self.shape(a))?;
        let (bb, cb, hb, wb) = dims4(self.shape(b))?;
        if (ba, ha, wa) != (bb, hb, wb) {
            bail!(
                Shape,
                "concat needs matching batch/spatial dims: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            );
        }
        let hw = ha * wa;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            out.extend_from_slice(&va[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&vb[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(vec![ba, ca + cb, ha, wa], out, rg, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "add shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// `alpha · a + (1 − alpha) · b` with `alpha` held constant.
    pub fn mix(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "mix shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let beta = T::one() - alpha;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mix { a, b, alpha }))
    }

    /// Spatial mean: `(B, C, H, W) → (B, C)`.
    pub fn mean_spatial(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(input))?;
        let hw = h * w;
        let n = T::from_usize(hw).unwrap();
        let out = self
            .value(input)
            .chunks_exact(hw)
            .map(|p| p.iter().copied().sum::<T>() / n)
            .collect();
        let rg = self.requires_grad(input);
        Ok(self.push(vec![b, c], out, rg, Op::MeanSpatial(input)))
    }

    /// `W / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`, `v`;
    /// `W` is viewed as a `(shape[0], rest)` matrix.
    pub fn spectral_divide(&mut self, kernel: Var, u: &[T], v: &[T], eps: T) -> Result<Var> {
        let shape = self.shape(kernel).to_vec();
        let rows = *shape.first().unwrap_or(&0);
        let cols = if rows == 0 { 0 } else { self.value(kernel).len() / rows };
        if u.len() != rows || v.len() != cols {
            bail!(Shape, "power-iteration vectors do not match kernel {shape:?}");
        }
        let w = self.value(kernel);
        let raw = bilinear(w, u, v);
        let clamped = !(raw > eps);
        let sigma = if clamped { eps } else { raw };
        let out = w.iter().map(|&x| x / sigma).collect();
        let rg = self.requires_grad(kernel);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::SpectralNorm {
                kernel,
                u: u.to_vec(),
                v: v.to_vec(),
                sigma,
                clamped,
            },
        ))
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "l1 shape mismatch {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let n = self.value(a).len();
        if n == 0 {
            bail!(Argument, "l1 of empty tensors");
        }
        let s: T = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y).abs()).sum();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(vec![1], vec![s / T::from_usize(n).unwrap()], rg, Op::L1Mean(a, b)))
    }

    /// Mean of `weights ⊙ input` over every element.
    pub fn weighted_mean(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let n = self.value(input).len();
        if weights.len() != n {
            bail!(Shape, "weights have {} entries, input {n}", weights.len());
        }
        if n == 0 {
            bail!(Argument, "mean of an empty tensor");
        }
        let s: T = self.value(input).iter().zip(weights).map(|(&x, &w)| x * w).sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![1],
            vec![s / T::from_usize(n).unwrap()],
            rg,
            Op::WeightedMean {
                input,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `½ · mean((input − target)²)`.
    pub fn half_squared_error(&mut self, input: Var, target: T) -> Result<Var> {
        let n = self.value(input).len();
        if n == 0 {
            bail!(Argument, "squared error of an empty batch");
        }
        let s: T = self.value(input).iter().map(|&x| (x - target) * (x - target)).sum();
        let rg = self.requires_grad(input);
        Ok(self.push(
            vec![1],
            vec![T::lit(0.5) * s / T::from_usize(n).unwrap()],
            rg,
            Op::HalfSquaredError { input, target },
        ))
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bilinear<T: Real>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            ur * w[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&a, &b)| a * b)
                .sum::<T>()
        })
        .sum()
}

/// Gradient contributions `(input index, d(root)/d(input))` of one node.
pub(crate) fn backward<T: Real>(
    op: &Op<T>,
    prev: &[Node<T>],
    node: &Node<T>,
    g: &[T],
) -> Vec<(usize, Vec<T>)> {
    let wants = |v: Var| prev[v.0].requires_grad;
    let val = |v: Var| prev[v.0].value.as_slice();
    let mut out = Vec::new();
    match op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            let want = (wants(*input), wants(*kernel), bias.is_some_and(wants));
            let grads = conv::backward(geom, val(*input), val(*kernel), g, want);
            if let Some(d) = grads.input {
                out.push((input.0, d));
            }
            if let Some(d) = grads.kernel {
                out.push((kernel.0, d));
            }
            if let (Some(b), Some(d)) = (bias, grads.bias) {
                out.push((b.0, d));
            }
        }
        Op::Upsample2x(x) => {
            let (b, c, h, w) = dims4(&prev[x.0].shape).unwrap();
            let mut d = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                let dst = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                    }
                }
            }
            out.push((x.0, d));
        }
        Op::Downsample2x(x) => {
            let (b, c, h, w) = dims4(&prev[x.0].shape).unwrap();
            let (oh, ow) = (h / 2, w / 2);
            let quarter = T::lit(0.25);
            let mut d = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for y in 0..h {
                    for xx in 0..w {
                        d[p * h * w + y * w + xx] = g[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                    }
                }
            }
            out.push((x.0, d));
        }
        Op::Relu(x) => {
            let d = node
                .value
                .iter()
                .zip(g)
                .map(|(&y, &gi)| if y > T::zero() { gi } else { T::zero() })
                .collect();
            out.push((x.0, d));
        }
        Op::LeakyRelu(x, slope) => {
            let d = val(*x)
                .iter()
                .zip(g)
                .map(|(&xi, &gi)| if xi > T::zero() { gi } else { gi * *slope })
                .collect();
            out.push((x.0, d));
        }
        Op::Sigmoid(x) => {
            let d = node
                .value
                .iter()
                .zip(g)
                .map(|(&y, &gi)| gi * y * (T::one() - y))
                .collect();
            out.push((x.0, d));
        }
        Op::BatchNorm {
            input,
            gain,
            shift,
            xhat,
            invstd,
            batch_stats,
        } => {
            let (b, c, h, w) = dims4(&node.shape).unwrap();
            let hw = h * w;
            let gv = val(*gain);
            let mut dgain = vec![T::zero(); c];
            let mut dshift = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dgain[ch] += g[i] * xhat[i];
                        dshift[ch] += g[i];
                    }
                }
            }
            if wants(*input) {
                let mut d = vec![T::zero(); g.len()];
                let n = T::from_usize(b * hw).unwrap();
                for ch in 0..c {
                    let k = gv[ch] * invstd[ch];
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            d[i] = if *batch_stats {
                                // dxhat = g·gain; dx = invstd/N·(N·dxhat − Σdxhat − xhat·Σ dxhat·xhat)
                                k * (g[i] - (dshift[ch] + xhat[i] * dgain[ch]) / n)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                out.push((input.0, d));
            }
            out.push((gain.0, dgain));
            out.push((shift.0, dshift));
        }
        Op::Concat(a, b) => {
            let (bs, ca, h, w) = dims4(&prev[a.0].shape).unwrap();
            let cb = prev[b.0].shape[1];
            let hw = h * w;
            let ct = ca + cb;
            let mut da = Vec::with_capacity(bs * ca * hw);
            let mut db = Vec::with_capacity(bs * cb * hw);
            for bi in 0..bs {
                da.extend_from_slice(&g[bi * ct * hw..(bi * ct + ca) * hw]);
                db.extend_from_slice(&g[(bi * ct + ca) * hw..(bi + 1) * ct * hw]);
            }
            out.push((a.0, da));
            out.push((b.0, db));
        }
        Op::Add(a, b) => {
            out.push((a.0, g.to_vec()));
            out.push((b.0, g.to_vec()));
        }
        Op::Scale(x, f) => out.push((x.0, g.iter().map(|&gi| gi * *f).collect())),
        Op::Mix { a, b, alpha } => {
            let beta = T::one() - *alpha;
            out.push((a.0, g.iter().map(|&gi| gi * *alpha).collect()));
            out.push((b.0, g.iter().map(|&gi| gi * beta).collect()));
        }
        Op::MeanSpatial(x) => {
            let (_, _, h, w) = dims4(&prev[x.0].shape).unwrap();
            let hw = h * w;
            let n = T::from_usize(hw).unwrap();
            let mut d = Vec::with_capacity(g.len() * hw);
            for &gi in g {
                d.extend(std::iter::repeat_n(gi / n, hw));
            }
            out.push((x.0, d));
        }
        Op::SpectralNorm {
            kernel,
            u,
            v,
            sigma,
            clamped,
        } => {
            if *clamped {
                out.push((kernel.0, g.iter().map(|&gi| gi / *sigma).collect()));
                return out;
            }
            let w = val(*kernel);
            let gw: T = g.iter().zip(w).map(|(&a, &b)| a * b).sum();
            let coef = gw / (*sigma * *sigma);
            let cols = v.len();
            let d = g
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi / *sigma - coef * u[i / cols] * v[i % cols])
                .collect();
            out.push((kernel.0, d));
        }
        Op::L1Mean(a, b) => {
            let n = T::from_usize(node_len_of(prev, *a)).unwrap();
            let s = g[0] / n;
            let da: Vec<T> = val(*a)
                .iter()
                .zip(val(*b))
                .map(|(&x, &y)| sign(x - y) * s)
                .collect();
            if wants(*b) {
                out.push((b.0, da.iter().map(|&v| -v).collect()));
            }
            out.push((a.0, da));
        }
        Op::WeightedMean { input, weights } => {
            let n = T::from_usize(weights.len()).unwrap();
            let s = g[0] / n;
            out.push((input.0, weights.iter().map(|&w| w * s).collect()));
        }
        Op::HalfSquaredError { input, target } => {
            let n = T::from_usize(node_len_of(prev, *input)).unwrap();
            let s = g[0] / n;
            out.push((input.0, val(*input).iter().map(|&x| (x - *target) * s).collect()));
        }
    }
    out
}

fn node_len_of<T>(prev: &[Node<T>], v: Var) -> usize {
    prev[v.0].value.len()
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
