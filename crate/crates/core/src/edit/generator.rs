use crate::error::Result;
use crate::field::{ensure_same_shape, Field};

/// Differentiable map from parameters to an image. `apply_grad` receives a
/// gradient with respect to the rendered pixels and is responsible for the
/// chain rule through its own parameterization.
pub trait Generator {
    type Params: Clone;

    fn render(&self, params: &Self::Params) -> Field;

    fn apply_grad(
        &self,
        params: &Self::Params,
        pixel_grad: &Field,
        step_size: f64,
    ) -> Result<Self::Params>;
}

/// The identity generator: parameters are the pixels themselves.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelGenerator;

impl Generator for PixelGenerator {
    type Params = Field;

    fn render(&self, params: &Field) -> Field {
        params.clone()
    }

    fn apply_grad(&self, params: &Field, pixel_grad: &Field, step_size: f64) -> Result<Field> {
        ensure_same_shape(params, pixel_grad)?;
        Ok(params - &(pixel_grad * step_size))
    }
}
