use super::{ops, Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: ops::Op<T>,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf; gradients flow into it iff it requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), t.requires_grad(), ops::Op::Leaf)
    }

    /// A leaf that always receives gradients.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, ops::Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            bail!(Shape, "shape {shape:?} needs {n} values, got {}", values.len());
        }
        Ok(self.push(shape, values, false, ops::Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val[0]
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<T>,
        requires_grad: bool,
        op: ops::Op<T>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Clears every gradient buffer on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Accumulates d(root)/d(node) into every node that requires a gradient.
    /// The root must hold a single value. Repeated calls accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            bail!(
                Shape,
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].shape
            );
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        // Seed with a fresh upstream gradient of one; existing node grads are kept so
        // that repeated backward calls accumulate.
        let mut upstream: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        upstream[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = upstream[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = ops::backward(&node.op, &self.nodes[..i], node, &g);
            for (input, delta) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut upstream[input] {
                    Some(acc) => add_into(acc, &delta),
                    slot @ None => *slot = Some(delta),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => add_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(acc: &mut [T], delta: &[T]) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += *d;
    }
}
