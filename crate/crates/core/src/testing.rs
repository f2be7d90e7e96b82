//! Analytic stand-in models for oracle tests.
//!
//! These run through exactly the same loss code paths as the real networks,
//! but their values and derivatives are known in closed form, which makes
//! them suitable as independent references.

use ndarray::{Array1, Array4};

use crate::networks::{CriticModel, GenOut, GeneratorModel};
use crate::nn::{ParamSet, Scalar};

/// Critic `f(y) = <w, y>` with an explicit weight tensor.
///
/// Input gradient is `w`, the directional derivative in direction `v` is
/// `<w, v>`, and the parameter gradient of `<v, grad f>` is `v` itself.
pub struct LinearCritic<S> {
    pub w: Array4<S>, // [1, c, h, w] weight, applied per sample
    pub w_grad: Array4<S>,
}

impl<S: Scalar> LinearCritic<S> {
    pub fn new(w: Array4<S>) -> Self {
        assert_eq!(w.dim().0, 1, "weight is a single template");
        let w_grad = Array4::zeros(w.raw_dim());
        LinearCritic { w, w_grad }
    }

    /// Weight with the given Euclidean norm, deterministic direction.
    pub fn with_norm(c: usize, h: usize, ww: usize, norm: f64) -> Self {
        let mut w = Array4::<S>::zeros((1, c, h, ww));
        for (i, v) in w.iter_mut().enumerate() {
            *v = S::from_f64(((i as f64) * 0.613 + 0.17).sin());
        }
        let cur = w.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        let scale = S::from_f64(norm / cur);
        w.mapv_inplace(|v| v * scale);
        LinearCritic::new(w)
    }

    fn dot_sample(&self, y: &Array4<S>, n: usize) -> S {
        let ys = y.index_axis(ndarray::Axis(0), n);
        let ws = self.w.index_axis(ndarray::Axis(0), 0);
        ys.iter().zip(ws.iter()).map(|(&a, &b)| a * b).sum()
    }
}

impl<S: Scalar> ParamSet<S> for LinearCritic<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&[S])) {
        f(self.w.as_slice().unwrap());
    }
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [S])) {
        f(self.w.as_slice_mut().unwrap());
    }
    fn for_each_grad(&self, f: &mut dyn FnMut(&[S])) {
        f(self.w_grad.as_slice().unwrap());
    }
    fn for_each_param_and_grad_mut(&mut self, f: &mut dyn FnMut(&mut [S], &[S])) {
        f(
            self.w.as_slice_mut().unwrap(),
            self.w_grad.as_slice().unwrap(),
        );
    }
    fn zero_grads(&mut self) {
        self.w_grad.fill(S::zero());
    }
}

impl<S: Scalar> CriticModel<S> for LinearCritic<S> {
    type Cache = Array4<S>; // just the inputs
    type TangentCache = Array4<S>; // the tangents

    fn forward(&self, y: &Array4<S>) -> Array1<S> {
        Array1::from_iter((0..y.dim().0).map(|n| self.dot_sample(y, n)))
    }

    fn forward_cached(&self, y: &Array4<S>) -> (Array1<S>, Array4<S>) {
        (self.forward(y), y.clone())
    }

    fn backward_input(&self, cache: &Array4<S>, seed: &Array1<S>) -> Array4<S> {
        let mut g = Array4::zeros(cache.raw_dim());
        for n in 0..cache.dim().0 {
            let s = seed[n];
            g.index_axis_mut(ndarray::Axis(0), n)
                .assign(&self.w.index_axis(ndarray::Axis(0), 0).mapv(|v| v * s));
        }
        g
    }

    fn backward_params(&mut self, cache: &Array4<S>, seed: &Array1<S>) {
        for n in 0..cache.dim().0 {
            let s = seed[n];
            let yn = cache.index_axis(ndarray::Axis(0), n);
            self.w_grad
                .index_axis_mut(ndarray::Axis(0), 0)
                .zip_mut_with(&yn, |g, &v| *g = *g + s * v);
        }
    }

    fn tangent_forward(&self, _cache: &Array4<S>, v: &Array4<S>) -> (Array1<S>, Array4<S>) {
        (self.forward(v), v.clone())
    }

    fn tangent_backward_params(
        &mut self,
        _cache: &Array4<S>,
        tcache: &Array4<S>,
        seed: &Array1<S>,
    ) {
        // d(sum_n seed_n <w, v_n>)/dw = sum_n seed_n v_n
        for n in 0..tcache.dim().0 {
            let s = seed[n];
            let vn = tcache.index_axis(ndarray::Axis(0), n);
            self.w_grad
                .index_axis_mut(ndarray::Axis(0), 0)
                .zip_mut_with(&vn, |g, &v| *g = *g + s * v);
        }
    }
}

/// Critic `f(y) = c` for every input. Zero gradients everywhere.
pub struct ConstantCritic<S> {
    pub value: S,
}

impl<S: Scalar> ParamSet<S> for ConstantCritic<S> {
    fn for_each_param(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_mut(&mut self, _f: &mut dyn FnMut(&mut [S])) {}
    fn for_each_grad(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_and_grad_mut(&mut self, _f: &mut dyn FnMut(&mut [S], &[S])) {}
    fn zero_grads(&mut self) {}
}

impl<S: Scalar> CriticModel<S> for ConstantCritic<S> {
    type Cache = (usize, [usize; 3]);
    type TangentCache = ();

    fn forward(&self, y: &Array4<S>) -> Array1<S> {
        Array1::from_elem(y.dim().0, self.value)
    }
    fn forward_cached(&self, y: &Array4<S>) -> (Array1<S>, Self::Cache) {
        let (b, c, h, w) = y.dim();
        (self.forward(y), (b, [c, h, w]))
    }
    fn backward_input(&self, cache: &Self::Cache, _seed: &Array1<S>) -> Array4<S> {
        Array4::zeros((cache.0, cache.1[0], cache.1[1], cache.1[2]))
    }
    fn backward_params(&mut self, _cache: &Self::Cache, _seed: &Array1<S>) {}
    fn tangent_forward(&self, cache: &Self::Cache, _v: &Array4<S>) -> (Array1<S>, ()) {
        (Array1::zeros(cache.0), ())
    }
    fn tangent_backward_params(&mut self, _c: &Self::Cache, _t: &(), _s: &Array1<S>) {}
}

/// Generator that returns its input as the image head and a constant scale.
pub struct IdentityGenerator<S> {
    pub scale: S,
}

impl<S: Scalar> IdentityGenerator<S> {
    pub fn new(scale: f64) -> Self {
        IdentityGenerator {
            scale: S::from_f64(scale),
        }
    }
}

impl<S: Scalar> ParamSet<S> for IdentityGenerator<S> {
    fn for_each_param(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_mut(&mut self, _f: &mut dyn FnMut(&mut [S])) {}
    fn for_each_grad(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_and_grad_mut(&mut self, _f: &mut dyn FnMut(&mut [S], &[S])) {}
    fn zero_grads(&mut self) {}
}

impl<S: Scalar> GeneratorModel<S> for IdentityGenerator<S> {
    type Cache = ();

    fn forward(&self, x: &Array4<S>) -> GenOut<S> {
        GenOut {
            image: x.clone(),
            scale: Array4::from_elem(x.raw_dim(), self.scale),
        }
    }
    fn forward_cached(&self, x: &Array4<S>) -> (GenOut<S>, ()) {
        (self.forward(x), ())
    }
    fn backward(&mut self, _cache: &(), _d_image: &Array4<S>, _d_scale: &Array4<S>) {}
    fn out_channels(&self) -> usize {
        1
    }
}

/// Generator applying a fixed pointwise map `x -> x^2` (image head) with a
/// constant scale head. Does not commute with the patch operator, so patch
/// residuals are nonzero.
pub struct SquareGenerator<S> {
    pub scale: S,
}

impl<S: Scalar> ParamSet<S> for SquareGenerator<S> {
    fn for_each_param(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_mut(&mut self, _f: &mut dyn FnMut(&mut [S])) {}
    fn for_each_grad(&self, _f: &mut dyn FnMut(&[S])) {}
    fn for_each_param_and_grad_mut(&mut self, _f: &mut dyn FnMut(&mut [S], &[S])) {}
    fn zero_grads(&mut self) {}
}

impl<S: Scalar> GeneratorModel<S> for SquareGenerator<S> {
    type Cache = ();

    fn forward(&self, x: &Array4<S>) -> GenOut<S> {
        GenOut {
            image: x.mapv(|v| v * v),
            scale: Array4::from_elem(x.raw_dim(), self.scale),
        }
    }
    fn forward_cached(&self, x: &Array4<S>) -> (GenOut<S>, ()) {
        (self.forward(x), ())
    }
    fn backward(&mut self, _cache: &(), _d_image: &Array4<S>, _d_scale: &Array4<S>) {}
    fn out_channels(&self) -> usize {
        1
    }
}
