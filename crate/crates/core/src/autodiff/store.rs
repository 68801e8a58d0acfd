use super::ops::{bilinear, BatchStats};
use super::tape::{Tape, Var};
use super::{Real, Tensor};
use crate::error::{bail, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight kept on the old running statistic per update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Named trainable tensors plus named non-trainable buffers (running statistics,
/// power-iteration vectors).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.params.push(tensor.with_requires_grad(true));
        self.params.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, values: Vec<T>) -> usize {
        self.buffer_names.push(name.into());
        self.buffers.push(values);
        self.buffers.len() - 1
    }

    pub fn param(&self, id: usize) -> &Tensor<T> {
        &self.params[id]
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn buffer(&self, id: usize) -> &[T] {
        &self.buffers[id]
    }

    pub fn buffer_mut(&mut self, id: usize) -> &mut Vec<T> {
        &mut self.buffers[id]
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on the tape; the returned handles are indexed like
    /// the parameters.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Records every parameter as a constant: the pass reads them but sends no
    /// gradient back.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.shape().to_vec(), p.values().to_vec()).expect("shape matches"))
            .collect()
    }

    /// Adds the tape gradients of bound parameters into their gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    /// Replaces parameter values by name; shapes must match.
    pub fn set_param_values(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> Result<()> {
        let Some(i) = self.names.iter().position(|n| n == name) else {
            bail!(State, "unknown parameter {name}");
        };
        if self.params[i].shape() != shape {
            bail!(
                Shape,
                "parameter {name} has shape {:?}, checkpoint has {shape:?}",
                self.params[i].shape()
            );
        }
        self.params[i].values_mut().copy_from_slice(&values);
        Ok(())
    }

    pub fn set_buffer_values(&mut self, name: &str, values: Vec<T>) -> Result<()> {
        let Some(i) = self.buffer_names.iter().position(|n| n == name) else {
            bail!(State, "unknown buffer {name}");
        };
        if self.buffers[i].len() != values.len() {
            bail!(Shape, "buffer {name} length mismatch");
        }
        self.buffers[i] = values;
        Ok(())
    }
}

/// Batch-norm layer handles into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gain: usize,
    pub shift: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gain = store.add_param(
            format!("{name}.gain"),
            Tensor::new(vec![channels], vec![T::one(); channels]).unwrap(),
        );
        let shift = store.add_param(format!("{name}.shift"), Tensor::zeros(vec![channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), vec![T::zero(); channels]);
        let running_var = store.add_buffer(format!("{name}.running_var"), vec![T::one(); channels]);
        Self {
            gain,
            shift,
            running_mean,
            running_var,
        }
    }

    /// Train mode normalizes by batch statistics and returns them for
    /// [`BatchNorm::update_running`]; eval mode uses the running statistics.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        vars: &[Var],
        x: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let eps = T::lit(BN_EPS);
        if train {
            tape.batch_norm(x, vars[self.gain], vars[self.shift], None, eps)
        } else {
            tape.batch_norm(
                x,
                vars[self.gain],
                vars[self.shift],
                Some((store.buffer(self.running_mean), store.buffer(self.running_var))),
                eps,
            )
        }
    }

    pub fn update_running<T: Real>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) {
        let keep = T::lit(BN_MOMENTUM);
        let take = T::one() - keep;
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &m) in store.buffer_mut(self.running_mean).iter_mut().zip(&stats.mean) {
            *r = keep * *r + take * m;
        }
        for (r, &v) in store.buffer_mut(self.running_var).iter_mut().zip(&stats.var) {
            *r = keep * *r + take * v * unbias;
        }
    }
}

/// Left/right singular-vector estimates of a kernel viewed as a `(rows, cols)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> PowerState<T> {
    /// Starts from a given left vector (normalized here) and a zero right vector.
    pub fn new(u0: Vec<T>, cols: usize) -> Self {
        let mut u = u0;
        normalize(&mut u);
        Self {
            u,
            v: vec![T::zero(); cols],
        }
    }

    /// One power-iteration step: `v ← Wᵀu/‖·‖`, `u ← Wv/‖·‖`.
    pub fn step(&mut self, w: &[T]) {
        let (rows, cols) = (self.u.len(), self.v.len());
        debug_assert_eq!(w.len(), rows * cols);
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            let ur = self.u[r];
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += ur * wv;
            }
        }
        normalize(&mut v);
        let mut u: Vec<T> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
            .collect();
        normalize(&mut u);
        self.u = u;
        self.v = v;
    }

    /// Current top singular value estimate `uᵀ W v`.
    pub fn sigma(&self, w: &[T]) -> T {
        bilinear(w, &self.u, &self.v)
    }
}

fn normalize<T: Real>(x: &mut [T]) {
    let n = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let n = n.max(T::lit(1e-12));
    x.iter_mut().for_each(|a| *a = *a / n);
}
