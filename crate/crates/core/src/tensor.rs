//! Dense row-major tensors over `f64`.

use crate::error::{Error, Result};

/// Identifies a node on a specific [`Tape`](crate::tape::Tape). A tensor
/// carrying one participates in gradient computation on that tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradId {
    pub(crate) tape: u64,
    pub(crate) node: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad_id: Option<GradId>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data. Every extent must be
    /// positive and the data length must equal the shape's product.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::contract("tensor shape must have at least one axis"));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} wants {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Used by the optimizer for in-place
    /// parameter updates; does not touch the tape association.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad_id(&self) -> Option<GradId> {
        self.grad_id
    }

    pub(crate) fn with_grad(mut self, id: GradId) -> Self {
        self.grad_id = Some(id);
        self
    }

    /// A copy with no tape association.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad_id: None,
        }
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor with {:?}", self.shape);
        self.data[0]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    /// One row of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Element access by multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of range on axis {i}");
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    /// Index of the largest element of a rank-1 tensor; first on ties.
    pub fn argmax(&self) -> usize {
        assert_eq!(self.rank(), 1, "argmax() on rank-{} tensor", self.rank());
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
