//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Values are held in `f64` buffers. A tensor tagged [`DType::F32`] has every
//! element rounded through `f32` when it is produced, so arithmetic behaves
//! like single precision while the kernels stay monomorphic. Any op that
//! touches an `F32` operand produces an `F32` result.
//!
//! Broadcasting is restricted to leading dimensions: a binary op accepts two
//! equal shapes, or one shape that is a suffix of the other.

mod autograd;
pub mod checkpoint;
pub mod gradcheck;
mod kernels;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{contract_err, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub(crate) fn join(self, other: DType) -> DType {
        if self == DType::F64 && other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub(crate) fn round(self, data: &mut [f64]) {
        if self == DType::F32 {
            for x in data.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Vector-Jacobian product of one recorded op: receives the op's output
/// values and the upstream gradient, returns one gradient per parent
/// (`None` when that parent needs no gradient).
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

pub(crate) struct Node {
    pub op: &'static str,
    pub parents: Vec<Tensor>,
    pub backward: BackwardFn,
}

pub(crate) struct Inner {
    pub id: u64,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Mutex<Option<Vec<f64>>>,
    pub node: Option<Node>,
}

// Long op chains would otherwise drop recursively through `parents`.
impl Drop for Inner {
    fn drop(&mut self) {
        let Some(node) = self.node.take() else {
            return;
        };
        let Node {
            parents, backward, ..
        } = node;
        drop(backward);
        let mut stack = parents;
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.0) {
                if let Some(n) = inner.node.take() {
                    drop(n.backward);
                    stack.extend(n.parents);
                }
            }
        }
    }
}

/// Cheaply clonable handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .field("data", &preview)
            .finish()
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return contract_err(format!("shape {shape:?} has a zero extent"));
    }
    let n: usize = shape.iter().product();
    if n != data.len() {
        return contract_err(format!(
            "shape {shape:?} needs {n} elements, buffer has {}",
            data.len()
        ));
    }
    Ok(())
}

impl Tensor {
    fn build(
        mut data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        dtype.round(&mut data);
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            dtype,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::with_dtype(data, shape, DType::F64)
    }

    pub fn with_dtype(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), dtype, false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        check_len(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), dtype, true, None))
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], vec![1], DType::F64, false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::build(vec![0.0; n], shape.to_vec(), DType::F64, false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Self::build(vec![value; n], shape.to_vec(), DType::F64, false, None)
    }

    /// Records the result of an op. The node is dropped when no parent
    /// requires a gradient, so inference builds no graph.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "{op}");
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents,
            backward,
        });
        Self::build(data, shape, dtype, requires_grad, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Name of the op that produced this tensor, if it is tracked.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return contract_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(
            self.0.data.clone(),
            self.0.shape.clone(),
            self.0.dtype,
            false,
            None,
        )
    }

    /// Fresh gradient-tracking leaf holding `data` with this tensor's shape
    /// and dtype. Used by optimizers and gradient checks.
    pub fn replaced(&self, data: Vec<f64>) -> Result<Tensor> {
        Tensor::param(data, self.shape(), self.dtype())
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Tensor::from_op(
            self.to_vec(),
            self.shape().to_vec(),
            dtype,
            "to_dtype",
            vec![self.clone()],
            Box::new(|_, g| vec![Some(g.to_vec())]),
        )
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
