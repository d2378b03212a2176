//! Row-wise primitives shared by the attention blocks.

use nalgebra::DMatrix;

use crate::error::{shape, Error, Result};

pub type FeatureMatrix = DMatrix<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b` applied to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub w: DMatrix<f64>,
    /// `1 x out`.
    pub b: DMatrix<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: DMatrix::zeros(input, output),
            b: DMatrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.w;
        for (mut col, b) in y.column_iter_mut().zip(self.b.iter()) {
            col.add_scalar_mut(*b);
        }
        y
    }

    pub(crate) fn check_input(&self, op: &'static str, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(shape(
                op,
                format!("expected {} feature columns, got {}", self.input_dim(), x.ncols()),
            ));
        }
        Ok(())
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: DMatrix::from_element(1, dim, 1.0),
            beta: DMatrix::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        let d = x.ncols() as f64;
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[(0, c)] + self.beta[(0, c)];
            }
        }
        y
    }
}

pub fn relu(mut x: DMatrix<f64>) -> DMatrix<f64> {
    x.apply(|v| *v = v.max(0.0));
    x
}

pub use crate::matching::{softmax_cols, softmax_rows};

/// `[a | b]` along columns.
pub fn hconcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

pub(crate) fn check_features(op: &'static str, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(shape(op, format!("empty feature matrix {}x{}", x.nrows(), x.ncols())));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("{op}: non-finite feature")));
    }
    Ok(())
}

pub(crate) fn check_same_rows(op: &'static str, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != b.nrows() {
        return Err(shape(op, format!("{} rows vs {} rows", a.nrows(), b.nrows())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let y = LayerNorm::new(4).forward(&x);
        for row in y.row_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmaxes_normalize() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 800.0, -800.0, 0.0]);
        for row in softmax_rows(&x).row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for col in softmax_cols(&x).column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_adds_bias_per_row() {
        let mut l = Linear::zeros(2, 2);
        l.w = DMatrix::identity(2, 2);
        l.b = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let y = l.forward(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 4.0, 3.0]));
    }
}
