//! Dense `f64` arrays used for images, latents and noise predictions.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

/// An image, latent or noise array of arbitrary shape.
pub type Field = ArrayD<f64>;

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Field> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::DimensionMismatch {
            expected,
            found: data.len(),
        });
    }
    Field::from_shape_vec(IxDyn(shape), data).map_err(|e| Error::InvalidRange(e.to_string()))
}

/// 1-D convenience constructor, mostly for tests and toy oracles.
pub fn vector(data: &[f64]) -> Field {
    Field::from_shape_vec(IxDyn(&[data.len()]), data.to_vec()).expect("1-D shape always matches")
}

pub fn ensure_same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn l2_norm(a: &Field) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_diff(a: &Field, b: &Field) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn all_finite(a: &Field) -> bool {
    a.iter().all(|v| v.is_finite())
}
