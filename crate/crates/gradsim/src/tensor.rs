//! Dense row-major f64 tensors.
//!
//! A `Tensor` is plain data detached from any computation graph. Graph
//! participation happens through node handles (see [`crate::graph`]), so a
//! bare tensor can be shared freely between threads and experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Wire form; conversion re-checks the shape/value-count invariant.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;
    fn try_from(r: TensorRepr) -> Result<Self> {
        Tensor::new(r.shape, r.values)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr {
            shape: t.shape,
            values: t.values,
        }
    }
}

impl Tensor {
    /// Build a tensor, enforcing `product(shape) == values.len()`.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {} values, got {}", expect, values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// Sole value of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.values[0]
    }

    /// Reinterpret the buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.values.clone())
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.values)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Mean squared difference against another tensor of the same shape.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let n = self.values.len().max(1) as f64;
        Ok(self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.values {
            *v = v.clamp(lo, hi);
        }
    }
}
