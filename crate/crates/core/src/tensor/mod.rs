//! Dense tensors and a reverse-mode gradient tape.
//!
//! A [`Tensor`] is a row-major buffer with an optional gradient. Computation
//! that needs derivatives is recorded on a [`Tape`]: values enter as leaves
//! (constants or parameters), every op appends one node, and
//! [`Tape::backward`] walks the nodes once in reverse to produce
//! [`Gradients`].

mod kernels;
mod tape;

pub use tape::{BatchNormMode, Gradients, NodeId, RunningStats, Tape, Var, OP_KINDS};

use crate::error::{Error, Result};

/// Element type of every tensor buffer.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
/// Element type of every tensor buffer.
#[cfg(feature = "f32")]
pub type Elem = f32;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Elem>,
    grad: Option<Vec<Elem>>,
    requires_grad: bool,
    tape_id: Option<NodeId>,
}

/// Equality ignores the tape binding.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data == other.data
            && self.grad == other.grad
            && self.requires_grad == other.requires_grad
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Elem>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(
                "tensor",
                "shape",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                "data",
                format!("shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        })
    }

    /// Builds a tensor whose shape was already validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<Elem>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
            tape_id: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Elem) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: Elem) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Elem] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Elem] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Elem> {
        self.data
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<Elem> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[Elem]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.set_requires_grad(requires_grad);
        self
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn tape_id(&self) -> Option<NodeId> {
        self.tape_id
    }

    pub(crate) fn set_tape_id(&mut self, id: Option<NodeId>) {
        self.tape_id = id;
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// Tensors that do not require gradients ignore the call.
    pub fn accumulate_grad(&mut self, delta: &[Elem]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(Error::dim(
                "accumulate_grad",
                "grad",
                format!("expected {} elements, got {}", self.data.len(), delta.len()),
            ));
        }
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(
                "reshape",
                "shape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        self.tape_id = None;
        Ok(self)
    }

    /// Samples `[N, C, H, W]` indices `index` along axis 0.
    pub fn select_rows(&self, index: &[usize]) -> Result<Self> {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(row * index.len());
        for &i in index {
            if i >= self.shape[0] {
                return Err(Error::dim(
                    "select_rows",
                    "axis 0",
                    format!("index {i} out of range {}", self.shape[0]),
                ));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Tensor::new(&shape, data)
    }
}
