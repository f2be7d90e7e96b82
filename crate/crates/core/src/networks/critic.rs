//! Strided-convolution critic mapping images to unbounded scalars.
//!
//! No normalization layers: the gradient penalty is defined per sample, and
//! the piecewise-linear structure (convs + leaky rectifier + affine output)
//! is what makes the tangent pass exact for it.

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha12Rng;

use super::spec::CriticSpec;
use super::CriticModel;
use crate::nn::conv::Conv2d;
use crate::nn::layers::{global_mean, global_mean_backward, LeakyRelu, Linear};
use crate::nn::{init_conv_he, init_linear_gaussian, ParamSet, Scalar};

const LEAKY_SLOPE: f64 = 0.2;

pub struct ConvCritic<S> {
    pub spec: CriticSpec,
    convs: Vec<Conv2d<S>>,
    act: LeakyRelu,
    linear: Linear<S>,
}

pub struct CriticCache<S> {
    conv_in: Vec<Array4<S>>,
    pre_act: Vec<Array4<S>>,
    pooled: Array2<S>,
    spatial: (usize, usize),
}

pub struct CriticTangentCache<S> {
    tconv_in: Vec<Array4<S>>,
    tpooled: Array2<S>,
}

impl<S: Scalar> ConvCritic<S> {
    pub fn new(spec: CriticSpec, rng: &mut ChaCha12Rng) -> crate::error::Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let mut convs = Vec::new();
        let mut cin = spec.in_channels;
        for &co in ch.iter() {
            let mut c = Conv2d::new(co, cin, 4, 2, 1);
            init_conv_he(&mut c, rng, LEAKY_SLOPE);
            convs.push(c);
            cin = co;
        }
        let mix = spec.mix_channels();
        let mut c = Conv2d::new(mix, cin, 3, 1, 1);
        init_conv_he(&mut c, rng, LEAKY_SLOPE);
        convs.push(c);
        let mut linear = Linear::new(1, mix);
        init_linear_gaussian(&mut linear, rng, 0.02);
        Ok(ConvCritic {
            spec,
            convs,
            act: LeakyRelu::new(LEAKY_SLOPE),
            linear,
        })
    }

    fn check_input(&self, y: &Array4<S>) {
        let (_, c, h, w) = y.dim();
        assert_eq!(c, self.spec.in_channels, "critic channel mismatch");
        assert!(
            h == self.spec.d && w == self.spec.d,
            "critic built for d={}, got {}x{}",
            self.spec.d,
            h,
            w
        );
    }

    fn seed_to_col(seed: &Array1<S>) -> Array2<S> {
        Array2::from_shape_vec((seed.len(), 1), seed.to_vec()).unwrap()
    }
}

impl<S: Scalar> CriticModel<S> for ConvCritic<S> {
    type Cache = CriticCache<S>;
    type TangentCache = CriticTangentCache<S>;

    fn forward(&self, y: &Array4<S>) -> Array1<S> {
        self.check_input(y);
        let mut t = y.clone();
        for conv in &self.convs {
            t = self.act.forward(&conv.forward(&t));
        }
        let pooled = global_mean(&t);
        let out = self.linear.forward(&pooled);
        out.column(0).to_owned()
    }

    fn forward_cached(&self, y: &Array4<S>) -> (Array1<S>, CriticCache<S>) {
        self.check_input(y);
        let mut conv_in = Vec::with_capacity(self.convs.len());
        let mut pre_act = Vec::with_capacity(self.convs.len());
        let mut t = y.clone();
        for conv in &self.convs {
            conv_in.push(t.clone());
            let z = conv.forward(&t);
            t = self.act.forward(&z);
            pre_act.push(z);
        }
        let (_, _, h, w) = t.dim();
        let pooled = global_mean(&t);
        let out = self.linear.forward(&pooled);
        (
            out.column(0).to_owned(),
            CriticCache {
                conv_in,
                pre_act,
                pooled,
                spatial: (h, w),
            },
        )
    }

    fn backward_input(&self, cache: &CriticCache<S>, seed: &Array1<S>) -> Array4<S> {
        let dy = Self::seed_to_col(seed);
        let dpooled = self.linear.backward_input(&dy);
        let mut dt = global_mean_backward(&dpooled, cache.spatial.0, cache.spatial.1);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpre = self.act.masked(&cache.pre_act[i], &dt);
            let (_, _, h, w) = cache.conv_in[i].dim();
            dt = conv.backward_input(&dpre, h, w);
        }
        dt
    }

    fn backward_params(&mut self, cache: &CriticCache<S>, seed: &Array1<S>) {
        let dy = Self::seed_to_col(seed);
        let dpooled = self.linear.backward(&cache.pooled, &dy, true);
        let mut dt = global_mean_backward(&dpooled, cache.spatial.0, cache.spatial.1);
        for i in (0..self.convs.len()).rev() {
            let dpre = self.act.masked(&cache.pre_act[i], &dt);
            dt = self.convs[i].backward(&cache.conv_in[i], &dpre);
        }
    }

    fn tangent_forward(
        &self,
        cache: &CriticCache<S>,
        v: &Array4<S>,
    ) -> (Array1<S>, CriticTangentCache<S>) {
        let mut tconv_in = Vec::with_capacity(self.convs.len());
        let mut t = v.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            tconv_in.push(t.clone());
            let z = conv.tangent_forward(&t);
            t = self.act.masked(&cache.pre_act[i], &z);
        }
        let tpooled = global_mean(&t);
        let out = self.linear.tangent_forward(&tpooled);
        (
            out.column(0).to_owned(),
            CriticTangentCache { tconv_in, tpooled },
        )
    }

    fn tangent_backward_params(
        &mut self,
        cache: &CriticCache<S>,
        tcache: &CriticTangentCache<S>,
        seed: &Array1<S>,
    ) {
        let dy = Self::seed_to_col(seed);
        let dtpooled = self.linear.backward(&tcache.tpooled, &dy, false);
        let mut dt = global_mean_backward(&dtpooled, cache.spatial.0, cache.spatial.1);
        for i in (0..self.convs.len()).rev() {
            let dpre = self.act.masked(&cache.pre_act[i], &dt);
            dt = self.convs[i].tangent_backward(&tcache.tconv_in[i], &dpre);
        }
    }
}

impl<S: Scalar> ParamSet<S> for ConvCritic<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&[S])) {
        for c in &self.convs {
            f(c.w.as_slice().unwrap());
            f(c.b.as_slice().unwrap());
        }
        f(self.linear.w.as_slice().unwrap());
        f(self.linear.b.as_slice().unwrap());
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [S])) {
        for c in &mut self.convs {
            f(c.w.as_slice_mut().unwrap());
            f(c.b.as_slice_mut().unwrap());
        }
        f(self.linear.w.as_slice_mut().unwrap());
        f(self.linear.b.as_slice_mut().unwrap());
    }

    fn for_each_grad(&self, f: &mut dyn FnMut(&[S])) {
        for c in &self.convs {
            f(c.w_grad.as_slice().unwrap());
            f(c.b_grad.as_slice().unwrap());
        }
        f(self.linear.w_grad.as_slice().unwrap());
        f(self.linear.b_grad.as_slice().unwrap());
    }

    fn for_each_param_and_grad_mut(&mut self, f: &mut dyn FnMut(&mut [S], &[S])) {
        for c in &mut self.convs {
            f(c.w.as_slice_mut().unwrap(), c.w_grad.as_slice().unwrap());
            f(c.b.as_slice_mut().unwrap(), c.b_grad.as_slice().unwrap());
        }
        f(
            self.linear.w.as_slice_mut().unwrap(),
            self.linear.w_grad.as_slice().unwrap(),
        );
        f(
            self.linear.b.as_slice_mut().unwrap(),
            self.linear.b_grad.as_slice().unwrap(),
        );
    }

    fn zero_grads(&mut self) {
        for c in &mut self.convs {
            c.zero_grads();
        }
        self.linear.zero_grads();
    }
}
