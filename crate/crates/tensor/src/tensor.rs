use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use crate::conv::ConvGeom;
use crate::float::Float;
use crate::shape::numel;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    previous: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let previous = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { previous }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.previous));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// Recorded operation producing a tensor; parents are kept alive by the graph.
pub(crate) enum Op<T: Float> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    Neg(Tensor<T>),
    Scale(Tensor<T>, T),
    Offset(Tensor<T>),
    Sqrt(Tensor<T>),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Tanh(Tensor<T>),
    LeakyRelu(Tensor<T>, T),
    Reshape(Tensor<T>),
    BroadcastTo(Tensor<T>),
    SumTo(Tensor<T>),
    Conv2d(Tensor<T>, Tensor<T>, ConvGeom),
    Conv2dInputGrad(Tensor<T>, Tensor<T>, ConvGeom),
    Conv2dWeightGrad(Tensor<T>, Tensor<T>, ConvGeom),
}

impl<T: Float> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            Conv2d(a, b, _) | Conv2dInputGrad(a, b, _) | Conv2dWeightGrad(a, b, _) => vec![a, b],
            Neg(a) | Scale(a, _) | Offset(a) | Sqrt(a) | Exp(a) | Log(a) | Tanh(a)
            | LeakyRelu(a, _) | Reshape(a) | BroadcastTo(a) | SumTo(a) => vec![a],
        }
    }
}

pub(crate) struct Node<T: Float> {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) op: Option<Op<T>>,
    pub(crate) requires_grad: bool,
}

/// Reference-counted n-dimensional array that records the operations applied to it.
///
/// Tensors are cheap to clone and confined to the thread that built them.
#[derive(Clone)]
pub struct Tensor<T: Float>(pub(crate) Rc<Node<T>>);

impl<T: Float> Tensor<T> {
    /// Constant tensor; gradients never flow into it.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Node {
            id: next_id(),
            shape: shape.to_vec(),
            data,
            op: None,
            requires_grad: false,
        }))
    }

    /// Leaf tensor that gradients are taken with respect to.
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Self {
        let t = Self::new(data, shape);
        let node = Rc::try_unwrap(t.0).ok().expect("fresh tensor is unique");
        Tensor(Rc::new(Node {
            requires_grad: true,
            ..node
        }))
    }

    pub fn from_f32(data: &[f32], shape: &[usize]) -> Self {
        Self::new(data.iter().map(|&v| T::lit(v as f64)).collect(), shape)
    }

    pub fn leaf_from_f32(data: &[f32], shape: &[usize]) -> Self {
        Self::leaf(data.iter().map(|&v| T::lit(v as f64)).collect(), shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(vec![T::zero(); numel(shape)], shape)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new(vec![value; numel(shape)], shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![value], &[])
    }

    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        let track = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data,
            op: if track { Some(op) } else { None },
            requires_grad: track,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Copy of the data with no graph attached.
    pub fn detach(&self) -> Self {
        Self::new(self.0.data.clone(), &self.0.shape)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.data.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}
