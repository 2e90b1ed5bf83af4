//! Dense fixed-dimension vector arithmetic.
//!
//! Every operation returns a fresh vector and rejects results containing NaN
//! or infinity. Reductions sum strictly left to right so that results are
//! bit-stable across runs and platforms.

use std::ops::Index;

use crate::error::{Error, Result};

/// A dense vector of model coordinates (the model, optimizer buffers, deltas).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Largest absolute coordinate.
    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_dims(x: &ParamVector, y: &ParamVector) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    Ok(())
}

fn zip_map(x: &ParamVector, y: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Result<ParamVector> {
    check_dims(x, y)?;
    ParamVector::new(x.0.iter().zip(&y.0).map(|(&a, &b)| f(a, b)).collect())
}

fn map(x: &ParamVector, f: impl Fn(f64) -> f64) -> Result<ParamVector> {
    ParamVector::new(x.0.iter().map(|&a| f(a)).collect())
}

/// `a * x + y`.
pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    zip_map(x, y, |xi, yi| a * xi + yi)
}

pub fn add(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    zip_map(x, y, |a, b| a + b)
}

pub fn sub(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    zip_map(x, y, |a, b| a - b)
}

pub fn scale(a: f64, x: &ParamVector) -> Result<ParamVector> {
    map(x, |v| a * v)
}

/// Divides every coordinate by `divisor` (true division, not multiplication
/// by the reciprocal).
pub fn div_scalar(x: &ParamVector, divisor: f64) -> Result<ParamVector> {
    if divisor == 0.0 {
        return Err(Error::invalid("division by zero scalar"));
    }
    map(x, |v| v / divisor)
}

pub fn ew_square(x: &ParamVector) -> Result<ParamVector> {
    map(x, |v| v * v)
}

pub fn ew_sqrt(x: &ParamVector) -> Result<ParamVector> {
    if let Some((index, &value)) = x.0.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::NegativeSqrt { index, value });
    }
    map(x, f64::sqrt)
}

pub fn ew_max(x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
    zip_map(x, y, f64::max)
}

pub fn ew_div(num: &ParamVector, den: &ParamVector) -> Result<ParamVector> {
    check_dims(num, den)?;
    if let Some((index, &value)) = den.0.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::NonPositiveDenominator { index, value });
    }
    zip_map(num, den, |a, b| a / b)
}

pub fn dot(x: &ParamVector, y: &ParamVector) -> Result<f64> {
    check_dims(x, y)?;
    Ok(dot_slices(&x.0, &y.0))
}

pub fn l2_norm(x: &ParamVector) -> f64 {
    norm_sq(x).sqrt()
}

pub fn norm_sq(x: &ParamVector) -> f64 {
    dot_slices(&x.0, &x.0)
}

pub(crate) fn dot_slices(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

/// Coordinatewise mean of equally sized vectors, summed in the given order.
pub fn mean(vectors: &[&ParamVector]) -> Result<ParamVector> {
    let first = vectors.first().ok_or(Error::EmptyBuffer)?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        check_dims(first, v)?;
        for (a, b) in acc.iter_mut().zip(&v.0) {
            *a += b;
        }
    }
    let count = vectors.len() as f64;
    ParamVector::new(acc.into_iter().map(|a| a / count).collect())
}

/// Row-major dense matrix, only as much as the objectives need.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self {
            rows: dim,
            cols: dim,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                left: self.cols,
                right: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot_slices(self.row(r), x)).collect())
    }

    /// `selfᵀ * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                left: self.rows,
                right: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(out)
    }
}
