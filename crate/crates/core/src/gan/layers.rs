use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamStore, Real, Tape, Tensor, Var};
use crate::error::Result;

/// Convolution with bias, held as indices into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kernel: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// He-normal kernel, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let values = (0..out_ch * in_ch * k * k).map(|_| T::lit(normal.sample(rng))).collect();
        let kernel = store.add_param(
            format!("{name}.kernel"),
            Tensor::new(vec![out_ch, in_ch, k, k], values).unwrap(),
        );
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Self {
            kernel,
            bias,
            stride,
            padding,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.kernel], Some(vars[self.bias]), self.stride, self.padding)
    }

    /// Same convolution with the kernel divided by its spectral-norm estimate.
    pub fn apply_normalized<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, u: &[T], v: &[T]) -> Result<Var> {
        let w = tape.spectral_divide(vars[self.kernel], u, v, T::lit(SN_EPS))?;
        tape.conv2d(x, w, Some(vars[self.bias]), self.stride, self.padding)
    }
}

/// Lower clamp of the spectral-norm estimate.
pub const SN_EPS: f64 = 1e-12;

pub const LEAKY_SLOPE: f64 = 0.2;
