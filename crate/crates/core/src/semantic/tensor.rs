use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

/// `T × D` token-level semantic vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticTensor {
    values: Matrix,
}

impl SemanticTensor {
    /// Wraps `values`, rejecting NaN or infinite entries.
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::State("semantic tensor has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub(crate) fn from_matrix_unchecked(values: Matrix) -> Self {
        Self { values }
    }

    /// Zero tokens of width `dim`.
    pub fn empty(dim: usize) -> Self {
        Self {
            values: Matrix::zeros(0, dim),
        }
    }

    pub fn tokens(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// Token-axis concatenation, `self` first.
    pub fn concat(&self, after: &SemanticTensor) -> Result<SemanticTensor> {
        if self.dim() != after.dim() {
            return Err(Error::Shape {
                op: "semantic_concat",
                left: self.values.shape(),
                right: after.values.shape(),
            });
        }
        Ok(Self {
            values: self.values.vstack(&after.values)?,
        })
    }
}
