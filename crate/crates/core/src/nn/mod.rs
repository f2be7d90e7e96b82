//! Minimal neural-network engine: convolution, normalization, activations,
//! parameter bookkeeping and the Adam optimizer.
//!
//! The engine is deliberately small. It supports exactly what the training
//! scheme needs: reverse-mode gradients for both networks, plus a tangent
//! (forward-over-reverse) pass through the critic for the gradient penalty.

pub mod conv;
pub mod layers;
pub mod scalar;

pub use conv::Conv2d;
pub use layers::{InstanceNorm, LeakyRelu, Linear};
pub use scalar::Scalar;

use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Uniform access to a model's parameters and accumulated gradients.
///
/// Traversal order is fixed by the implementation and shared by the
/// optimizer, checkpointing and the gradient checks.
pub trait ParamSet<S: Scalar> {
    fn for_each_param(&self, f: &mut dyn FnMut(&[S]));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [S]));
    fn for_each_grad(&self, f: &mut dyn FnMut(&[S]));
    /// Visit `(values, grads)` of each tensor in traversal order.
    fn for_each_param_and_grad_mut(&mut self, f: &mut dyn FnMut(&mut [S], &[S]));
    fn zero_grads(&mut self);

    fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.len());
        n
    }

    fn read_params(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_param(&mut |p| out.extend_from_slice(p));
        out
    }

    fn write_params(&mut self, src: &[S]) {
        let mut off = 0;
        self.for_each_param_mut(&mut |p| {
            p.copy_from_slice(&src[off..off + p.len()]);
            off += p.len();
        });
        assert_eq!(off, src.len(), "parameter vector length mismatch");
    }

    fn read_grads(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_grad(&mut |p| out.extend_from_slice(p));
        out
    }
}

/// Adam with externally supplied hyperparameters. Moment vectors are flat
/// and aligned with the [`ParamSet`] traversal order.
#[derive(Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
        }
    }

    pub fn step<P: ParamSet<S>>(&mut self, model: &mut P) {
        self.t += 1;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64(self.lr);
        let eps = S::from_f64(self.eps);
        let mut off = 0;
        let m = &mut self.m;
        let v = &mut self.v;
        model.for_each_param_and_grad_mut(&mut |vals, grads| {
            for i in 0..vals.len() {
                let g = grads[i];
                let mi = b1 * m[off + i] + (one - b1) * g;
                let vi = b2 * v[off + i] + (one - b2) * g * g;
                m[off + i] = mi;
                v[off + i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                vals[i] = vals[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            off += vals.len();
        });
        assert_eq!(off, m.len(), "optimizer state length mismatch");
    }
}

/// He-style normal init matched to the leaky slope of the following
/// activation. Draws are made in f64 so f32 and f64 instantiations of the
/// same seed see identical values.
pub fn init_conv_he<S: Scalar>(conv: &mut Conv2d<S>, rng: &mut ChaCha12Rng, slope: f64) {
    let (_, ci, k, _) = conv.w.dim();
    let fan_in = (ci * k * k) as f64;
    let std = (2.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
    for wv in conv.w.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *wv = S::from_f64(z * std);
    }
    conv.b.fill(S::zero());
}

/// Small-gaussian init for output heads.
pub fn init_conv_gaussian<S: Scalar>(conv: &mut Conv2d<S>, rng: &mut ChaCha12Rng, std: f64) {
    for wv in conv.w.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *wv = S::from_f64(z * std);
    }
    conv.b.fill(S::zero());
}

pub fn init_linear_gaussian<S: Scalar>(lin: &mut Linear<S>, rng: &mut ChaCha12Rng, std: f64) {
    for wv in lin.w.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *wv = S::from_f64(z * std);
    }
    lin.b.fill(S::zero());
}

/// Draw a uniform f64 in `[lo, hi]`, castable to the engine scalar.
pub fn uniform_f64(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..=hi)
}
