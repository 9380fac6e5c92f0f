//! Finite-difference gradient checking.
//!
//! The checker evaluates a scalar-valued function twice per coordinate
//! (central differences) and compares against the tape's analytic gradient.
//! Run it in `f64`; `f32` has too little headroom for the step sizes used.

use super::tape::{NodeId, Tape};
use super::tensor::{NumError, Scalar, Tensor};

/// Max over all coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<T, F>(f: &F, point: &Tensor<T>, step: T) -> Result<T, NumError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId, NumError>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_subset(f, point, step, &coords)
}

/// Same as [`grad_check`] but only probes the listed coordinates. Used for
/// spot checks on large parameter tensors.
pub fn grad_check_subset<T, F>(
    f: &F,
    point: &Tensor<T>,
    step: T,
    coords: &[usize],
) -> Result<T, NumError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, NodeId) -> Result<NodeId, NumError>,
{
    assert!(step > T::zero(), "finite-difference step must be positive");

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone())?;
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_scalar() {
        return Err(NumError::NonScalarLoss {
            shape: tape.value(loss).shape().to_vec(),
        });
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |t: &Tensor<T>| -> Result<T, NumError> {
        let mut tape = Tape::new();
        let x = tape.leaf(t.clone())?;
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).scalar_value())
    };

    let tiny = T::of_f64(1e-8);
    let two = T::of_f64(2.0);
    let mut worst = T::zero();
    let mut probe = point.clone();
    for &c in coords {
        let original = probe.data()[c];
        probe.data_mut()[c] = original + step;
        let plus = eval(&probe)?;
        probe.data_mut()[c] = original - step;
        let minus = eval(&probe)?;
        probe.data_mut()[c] = original;

        let numeric = (plus - minus) / (two * step);
        let err = (analytic.data()[c] - numeric).abs() / (numeric.abs() + tiny);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
