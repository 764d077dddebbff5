//! Dense row-major tensors and the spatial feature-map wrapper.

use crate::error::{Error, Result};

/// A dense row-major tensor of doubles.
///
/// Most kernels view a tensor as a matrix: the last axis is the column
/// (channel) axis and all leading axes are flattened into rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A branch activation: a `grid_h x grid_w` grid of `dim`-channel tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    /// 1-based index of the branch that produced this map.
    pub branch_id: usize,
    tokens: Tensor,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, branch_id: usize, data: Vec<f64>) -> Result<Self> {
        let tokens = Tensor::new(vec![grid_h, grid_w, dim], data)?;
        Ok(FeatureMap { grid_h, grid_w, dim, branch_id, tokens })
    }

    pub fn from_tensor(tensor: Tensor, grid_h: usize, grid_w: usize, branch_id: usize) -> Result<Self> {
        let dim = tensor.cols();
        if tensor.rows() != grid_h * grid_w {
            return Err(Error::Shape(format!(
                "{} token rows do not fit a {}x{} grid",
                tensor.rows(),
                grid_h,
                grid_w
            )));
        }
        FeatureMap::new(grid_h, grid_w, dim, branch_id, tensor.into_data())
    }

    pub fn zeros(grid_h: usize, grid_w: usize, dim: usize, branch_id: usize) -> Self {
        FeatureMap { grid_h, grid_w, dim, branch_id, tokens: Tensor::zeros(vec![grid_h, grid_w, dim]) }
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn data(&self) -> &[f64] {
        self.tokens.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tokens.data_mut()
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> f64 {
        self.tokens.data()[(i * self.grid_w + j) * self.dim + c]
    }

    /// Tokens as a `[grid_h * grid_w, dim]` matrix.
    pub fn to_matrix(&self) -> Tensor {
        Tensor { shape: vec![self.num_tokens(), self.dim], data: self.tokens.data().to_vec() }
    }
}
