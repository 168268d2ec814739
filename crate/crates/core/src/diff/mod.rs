//! Reverse-mode automatic differentiation on an explicitly recorded op graph.
//!
//! The engine is a Wengert tape: forward results are computed eagerly when an
//! op is recorded, and [`Tape::backward`] replays the recorded ops in exact
//! reverse order, accumulating gradients as sums over all consumers of each
//! tensor. Tensors are dense, row-major, rank <= 4; image-like tensors use
//! `[batch, height, width, channels]`.
//!
//! Everything is generic over the scalar type: training runs in `f32`, the
//! finite-difference harness in [`gradcheck`] re-instantiates the same ops in
//! `f64`.

mod backward;
pub mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use ops::{BnStats, BnUse};

use crate::{Error, Result};
use num_traits::{Float, FromPrimitive};

/// Scalar element type for tensors (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + std::iter::Sum + Default + std::fmt::Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite scalar literal")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Handle to a tensor on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub value: Vec<T>,
    pub shape: Vec<usize>,
    pub op: ops::Op<T>,
    pub requires_grad: bool,
}

/// Recorded computation graph. Single-owner: one forward/backward pass at a
/// time; independent tapes may run on different threads.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        value: Vec<T>,
        shape: Vec<usize>,
        op: ops::Op<T>,
        requires_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        id
    }

    /// Register an input tensor. Gradients are produced for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.len() > 4 {
            return Err(Error::Shape {
                op: "leaf",
                dimension: "rank",
                actual: shape.len(),
                expected: 4,
            });
        }
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(Error::Shape {
                op: "leaf",
                dimension: "element count",
                actual: data.len(),
                expected: count,
            });
        }
        Ok(self.push(data, shape.to_vec(), ops::Op::Leaf, requires_grad))
    }

    /// Register a constant (no gradient).
    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: T) -> TensorId {
        self.push(vec![v], vec![1], ops::Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> T {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub(crate) fn input_requires_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }
}

/// Gradient buffers for one backward pass, indexed by [`TensorId`].
pub struct Gradients<T: Scalar> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[cfg(test)]
mod tests;
