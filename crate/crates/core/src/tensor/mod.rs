//! Dense `f64` tensors, a reverse-mode tape, parameter storage and the Adam
//! optimizer. Only what the grounding model needs: ranks 0 to 2, row-major.

mod adam;
mod checkpoint;
mod kernels;
mod params;
mod tape;

pub use adam::AdamConfig;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use params::{Gradients, ParamId, ParameterStore};
pub use tape::{Tape, Var};

use crate::error::{DgaError, Result};

/// Row-major tensor of rank 0, 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(DgaError::dim(format!("rank {} unsupported", shape.len())));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(DgaError::dim(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DgaError::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DgaError::dim("ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Matrix view: scalars are 1×1 and vectors are single rows.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    /// Standard matrix product of two rank-2 (or rank-1 as row) tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(DgaError::dim(format!(
                "matmul {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => unreachable!("rank > 2 rejected at construction"),
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(DgaError::dim("softmax of empty input"));
    }
    let mut out = values.to_vec();
    kernels::softmax_in_place(&mut out);
    Ok(out)
}

/// `v / (‖v‖₂ + ε)` with ε = [`L2_EPS`].
pub fn l2_normalize(values: &[f64]) -> Vec<f64> {
    let norm = kernels::norm(values);
    values.iter().map(|v| v / (norm + L2_EPS)).collect()
}

pub const L2_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_examples() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(id.matmul(&a).unwrap(), a);

        let ones = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);

        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(b.matmul(&b), Err(DgaError::Dimension(_))));
    }

    #[test]
    fn construction_checks_shape() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1], vec![1.0]).is_err());
        assert_eq!(Tensor::scalar(2.0).item(), Some(2.0));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.7, 0.7, 0.7]).unwrap();
        for p in u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[0.0, 2f64.ln()]).unwrap();
        assert!((s[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 2.0 / 3.0).abs() < 1e-15);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn l2_normalize_examples() {
        let v = l2_normalize(&[3.0, 4.0]);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        let u = l2_normalize(&[0.0, 1.0]);
        assert!((u[1] - 1.0).abs() < 1e-11 && u[0] == 0.0);
    }
}
