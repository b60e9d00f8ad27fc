use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64` values.
///
/// Every value in this crate is rank 2: a batch of `rows` samples with `cols`
/// features each. Scalars are `1 x 1`, single samples are `1 x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Array2<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config(format!(
                "tensor shape must be positive, got [{rows}, {cols}]"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::config(format!(
                "tensor shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::config(e.to_string()))?;
        Ok(Tensor { data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor shape must be positive");
        Tensor {
            data: Array2::zeros((rows, cols)),
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor shape must be positive");
        Tensor {
            data: Array2::from_elem((rows, cols), value),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            data: Array2::from_elem((1, 1), value),
        }
    }

    /// A `1 x n` row.
    pub fn row_vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "tensor shape must be positive");
        Tensor {
            data: Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("shape"),
        }
    }

    /// An `n x 1` column.
    pub fn column(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "tensor shape must be positive");
        Tensor {
            data: Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("shape"),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
            return Err(Error::config(format!(
                "row {i} has {} entries, expected {cols}",
                r.len()
            )));
        }
        Tensor::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Tensor { data: Array2::eye(n) }
    }

    pub(crate) fn from_array(data: Array2<f64>) -> Self {
        debug_assert!(data.nrows() > 0 && data.ncols() > 0);
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Tensor { data }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.data.nrows(), self.data.ncols()]
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub(crate) fn array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Row-major view of all values.
    pub fn values(&self) -> &[f64] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.data.as_slice_mut().expect("standard layout")
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[[row, col]]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.cols();
        &self.values()[i * cols..(i + 1) * cols]
    }

    pub fn row_view(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// The single value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "item() on non-scalar tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.data[[0, 0]])
    }

    /// Values of an `n x 1` column (or any tensor, flattened).
    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        Tensor::from_array(self.data.select(Axis(0), indices))
    }

    /// Stacks tensors with equal column counts on top of each other.
    pub fn vstack(parts: &[&Tensor]) -> Result<Tensor> {
        let views: Vec<_> = parts.iter().map(|t| t.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::config(format!("vstack: {e}")))?;
        Ok(Tensor::from_array(data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_array(self.data.mapv(f))
    }

    /// Euclidean norm of every row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.data.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::config(format!(
                "sub: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Tensor::from_array(&self.data - &other.data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
