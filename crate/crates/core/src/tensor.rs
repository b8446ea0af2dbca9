//! Dense row-major f64 tensors of rank 0, 1, or 2.
//!
//! Rank 2 is all the surrounding algorithms need: states and actions batch
//! into matrices, losses reduce to rank-0 scalars. Shapes are a small `Copy`
//! struct rather than a `Vec` because the autodiff arena creates millions of
//! nodes per training run and per-node allocations add up.

use alloc::vec;
use alloc::vec::Vec;

/// Shape of a tensor: up to two dimensions, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 2],
    rank: u8,
}

impl Shape {
    /// Rank-0 scalar shape.
    pub const fn scalar() -> Self {
        Shape { dims: [1, 1], rank: 0 }
    }

    /// Rank-1 vector shape `[n]`.
    pub const fn vector(n: usize) -> Self {
        Shape { dims: [n, 1], rank: 1 }
    }

    /// Rank-2 matrix shape `[rows, cols]`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols], rank: 2 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    /// Dimensions as a slice of length `rank()`.
    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    /// Total element count (1 for scalars).
    pub fn numel(&self) -> usize {
        match self.rank {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[0] * self.dims[1],
        }
    }

    /// Row count: 1 for scalars, n for vectors, rows for matrices.
    pub fn rows(&self) -> usize {
        match self.rank {
            2 => self.dims[0],
            _ => 1,
        }
    }

    /// Size of the last (fastest-varying) axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        match self.rank {
            0 => 1,
            1 => self.dims[0],
            _ => self.dims[1],
        }
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.dims().iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Dense f64 tensor. Invariant: `data.len() == shape.numel()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from a shape and matching data; panics if the lengths disagree
    /// (that is always a programming error, not an input error).
    pub fn new(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor shape {shape} wants {} elements, got {}",
            shape.numel(),
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: Shape::vector(data.len()), data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(Shape::matrix(rows, cols), data)
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a rank-0/one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {}", self.shape);
        self.data[0]
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
