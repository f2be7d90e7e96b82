//! Generator and critic networks plus the model traits the losses operate
//! on. Analytic stand-ins for tests live in [`crate::testing`].

mod critic;
mod spec;
mod unet;

pub use critic::{ConvCritic, CriticCache, CriticTangentCache};
pub use spec::{
    CriticSpec, GeneratorSpec, ModelSpec, CRITIC_DEFAULT_WIDTH, DEFAULT_SIGMA_MIN,
    GENERATOR_DEFAULT_WIDTH,
};
pub use unet::{UNetCache, UNetGenerator};

use ndarray::{Array1, Array4};

use crate::nn::{ParamSet, Scalar};

/// Generator output: transferred image plus a strictly positive per-pixel
/// scale map of identical shape.
#[derive(Debug, Clone)]
pub struct GenOut<S> {
    pub image: Array4<S>,
    pub scale: Array4<S>,
}

/// Anything that maps input batches to (image, scale) pairs and can
/// backpropagate cotangents of both heads into its parameters.
pub trait GeneratorModel<S: Scalar>: ParamSet<S> {
    type Cache;

    /// Inference pass, no gradient bookkeeping.
    fn forward(&self, x: &Array4<S>) -> GenOut<S>;
    /// Inference pass computing only the image head (the critic never sees
    /// the scale map).
    fn forward_image(&self, x: &Array4<S>) -> Array4<S> {
        self.forward(x).image
    }
    fn forward_cached(&self, x: &Array4<S>) -> (GenOut<S>, Self::Cache);
    /// Accumulate parameter gradients for `d_image` and `d_scale` cotangents.
    fn backward(&mut self, cache: &Self::Cache, d_image: &Array4<S>, d_scale: &Array4<S>);
    fn out_channels(&self) -> usize;
}

/// Scalar-valued critic with reverse-mode passes and a tangent pass.
///
/// The tangent pair (`tangent_forward` / `tangent_backward_params`) computes
/// parameter gradients of directional derivatives `<v, grad_y f(y)>`, which
/// is what the gradient penalty differentiates.
pub trait CriticModel<S: Scalar>: ParamSet<S> {
    type Cache;
    type TangentCache;

    fn forward(&self, y: &Array4<S>) -> Array1<S>;
    fn forward_cached(&self, y: &Array4<S>) -> (Array1<S>, Self::Cache);
    /// `d(sum_n seed_n f(y_n)) / dy`; parameters untouched.
    fn backward_input(&self, cache: &Self::Cache, seed: &Array1<S>) -> Array4<S>;
    /// Accumulate `d(sum_n seed_n f(y_n)) / domega` into internal gradients.
    fn backward_params(&mut self, cache: &Self::Cache, seed: &Array1<S>);
    /// Directional derivatives `<grad f(y_n), v_n>` per sample.
    fn tangent_forward(
        &self,
        cache: &Self::Cache,
        v: &Array4<S>,
    ) -> (Array1<S>, Self::TangentCache);
    /// Accumulate `d(sum_n seed_n <grad f(y_n), v_n>) / domega`.
    fn tangent_backward_params(
        &mut self,
        cache: &Self::Cache,
        tcache: &Self::TangentCache,
        seed: &Array1<S>,
    );
}
