//! Dense row-major tensors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::rng::Rng;

/// Floating-point element type. Training and inference use `f32`; the
/// gradient-check suite instantiates every op in `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }
    fn to_f64_val(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
    /// Large negative value used by causal masking. Finite so the
    /// no-NaN/no-Inf invariant survives masked rows.
    fn mask_fill() -> Self {
        Self::of_f64(-1e9)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index out of range ({detail})")]
    IndexOutOfRange { op: &'static str, detail: String },
}

/// Dense tensor: a shape and a flat row-major value array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, NumError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::of_f64(rng.normal_f64() * std))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> T {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        debug_assert_eq!(self.shape.len(), 2, "dims2 on shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        let (_, cols) = self.dims2();
        self.data[i * cols + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<(), NumError> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite { op })
        }
    }

    /// Converts element type (used to lift f32 checkpoints into the f64
    /// gradient-check mode).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.to_f64_val())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_val()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::<f32>::from_vec(vec![2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, NumError::ShapeMismatch { .. }));
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let t = Tensor::<f64>::scalar(3.5);
        assert!(t.is_scalar());
        assert_eq!(t.numel(), 1);
        assert_eq!(t.scalar_value(), 3.5);
    }

    #[test]
    fn shape_product_matches_len() {
        let t = Tensor::<f32>::zeros(vec![3, 4, 5]);
        assert_eq!(t.numel(), 60);
        assert_eq!(t.shape(), &[3, 4, 5]);
    }

    #[test]
    fn finite_check_catches_nan() {
        let mut t = Tensor::<f32>::zeros(vec![2]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.check_finite("test").is_err());
    }
}
