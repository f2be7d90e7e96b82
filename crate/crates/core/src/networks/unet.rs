//! U-net generator with five downsampling stages, concatenative skip
//! connections and two output heads (image + scale map).

use ndarray::Array4;
use rand_chacha::ChaCha12Rng;

use super::spec::GeneratorSpec;
use super::{GenOut, GeneratorModel};
use crate::nn::conv::Conv2d;
use crate::nn::layers::{
    concat_channels, softplus_floor_backward, softplus_floor_forward, split_channels,
    tanh_backward, tanh_forward, upsample2x, upsample2x_backward, InstanceNorm, LeakyRelu,
};
use crate::nn::{init_conv_gaussian, init_conv_he, ParamSet, Scalar};

const LEAKY_SLOPE: f64 = 0.2;
/// Bias of the scale head at init puts softplus near 0.5.
const SIGMA_HEAD_BIAS: f64 = -0.432752;

/// Convolution followed by optional instance norm and a leaky rectifier.
#[derive(Clone)]
struct ConvBlock<S> {
    conv: Conv2d<S>,
    norm: Option<InstanceNorm<S>>,
    act: LeakyRelu,
}

struct ConvBlockCache<S> {
    x: Array4<S>,
    post_conv: Array4<S>,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(co: usize, ci: usize, stride: usize, norm: bool, rng: &mut ChaCha12Rng) -> Self {
        let mut conv = Conv2d::new(co, ci, 3, stride, 1);
        init_conv_he(&mut conv, rng, LEAKY_SLOPE);
        ConvBlock {
            conv,
            norm: if norm { Some(InstanceNorm::new(co)) } else { None },
            act: LeakyRelu::new(LEAKY_SLOPE),
        }
    }

    fn forward(&self, x: &Array4<S>) -> Array4<S> {
        let y = self.conv.forward(x);
        let y = match &self.norm {
            Some(n) => n.forward(&y),
            None => y,
        };
        self.act.forward(&y)
    }

    fn forward_cached(&self, x: &Array4<S>) -> (Array4<S>, ConvBlockCache<S>) {
        let post_conv = self.conv.forward(x);
        let normed = match &self.norm {
            Some(n) => n.forward(&post_conv),
            None => post_conv.clone(),
        };
        let out = self.act.forward(&normed);
        (
            out,
            ConvBlockCache {
                x: x.clone(),
                post_conv,
            },
        )
    }

    fn backward(&mut self, cache: &ConvBlockCache<S>, dy: &Array4<S>) -> Array4<S> {
        // recompute the normalized pre-activation (cheap next to the conv)
        let d_act_in = match &self.norm {
            Some(n) => {
                let normed = n.forward(&cache.post_conv);
                self.act.masked(&normed, dy)
            }
            None => self.act.masked(&cache.post_conv, dy),
        };
        let d_conv_out = match &mut self.norm {
            Some(n) => n.backward(&cache.post_conv, &d_act_in),
            None => d_act_in,
        };
        self.conv.backward(&cache.x, &d_conv_out)
    }

    fn zero_grads(&mut self) {
        self.conv.zero_grads();
        if let Some(n) = &mut self.norm {
            n.zero_grads();
        }
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&[S])) {
        f(self.conv.w.as_slice().unwrap());
        f(self.conv.b.as_slice().unwrap());
        if let Some(n) = &self.norm {
            f(n.gamma.as_slice().unwrap());
            f(n.beta.as_slice().unwrap());
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [S])) {
        f(self.conv.w.as_slice_mut().unwrap());
        f(self.conv.b.as_slice_mut().unwrap());
        if let Some(n) = &mut self.norm {
            f(n.gamma.as_slice_mut().unwrap());
            f(n.beta.as_slice_mut().unwrap());
        }
    }

    fn for_each_grad(&self, f: &mut dyn FnMut(&[S])) {
        f(self.conv.w_grad.as_slice().unwrap());
        f(self.conv.b_grad.as_slice().unwrap());
        if let Some(n) = &self.norm {
            f(n.gamma_grad.as_slice().unwrap());
            f(n.beta_grad.as_slice().unwrap());
        }
    }

    fn for_each_pg_mut(&mut self, f: &mut dyn FnMut(&mut [S], &[S])) {
        f(
            self.conv.w.as_slice_mut().unwrap(),
            self.conv.w_grad.as_slice().unwrap(),
        );
        f(
            self.conv.b.as_slice_mut().unwrap(),
            self.conv.b_grad.as_slice().unwrap(),
        );
        if let Some(n) = &mut self.norm {
            f(
                n.gamma.as_slice_mut().unwrap(),
                n.gamma_grad.as_slice().unwrap(),
            );
            f(
                n.beta.as_slice_mut().unwrap(),
                n.beta_grad.as_slice().unwrap(),
            );
        }
    }
}

/// Output head: one plain conv block (no norm) and a projection conv.
#[derive(Clone)]
struct Head<S> {
    block: ConvBlock<S>,
    out: Conv2d<S>,
}

struct HeadCache<S> {
    block: ConvBlockCache<S>,
    block_out: Array4<S>,
    pre_act: Array4<S>,
}

impl<S: Scalar> Head<S> {
    fn new(width: usize, c_out: usize, rng: &mut ChaCha12Rng, bias: f64, proj_std: f64) -> Self {
        let block = ConvBlock::new(width, width, 1, false, rng);
        let mut out = Conv2d::new(c_out, width, 3, 1, 1);
        init_conv_gaussian(&mut out, rng, proj_std);
        out.b.fill(S::from_f64(bias));
        Head { block, out }
    }

    fn forward(&self, t: &Array4<S>) -> Array4<S> {
        self.out.forward(&self.block.forward(t))
    }

    fn forward_cached(&self, t: &Array4<S>) -> (Array4<S>, HeadCache<S>) {
        let (block_out, bc) = self.block.forward_cached(t);
        let pre_act = self.out.forward(&block_out);
        (
            pre_act.clone(),
            HeadCache {
                block: bc,
                block_out,
                pre_act,
            },
        )
    }

    /// `d_pre` is the cotangent at the pre-activation output.
    fn backward(&mut self, cache: &HeadCache<S>, d_pre: &Array4<S>) -> Array4<S> {
        let d_block = self.out.backward(&cache.block_out, d_pre);
        self.block.backward(&cache.block, &d_block)
    }
}

/// The generator network.
pub struct UNetGenerator<S> {
    pub spec: GeneratorSpec,
    stem: ConvBlock<S>,
    mixes: Vec<ConvBlock<S>>,
    downs: Vec<ConvBlock<S>>,
    bottleneck: ConvBlock<S>,
    up_convs: Vec<ConvBlock<S>>, // indexed by encoder stage (0 = shallowest)
    fuses: Vec<ConvBlock<S>>,
    head_img: Head<S>,
    head_sigma: Head<S>,
}

pub struct UNetCache<S> {
    stem: ConvBlockCache<S>,
    mixes: Vec<ConvBlockCache<S>>,
    downs: Vec<ConvBlockCache<S>>,
    bottleneck: ConvBlockCache<S>,
    up_convs: Vec<ConvBlockCache<S>>,
    fuses: Vec<ConvBlockCache<S>>,
    head_img: HeadCache<S>,
    head_sigma: HeadCache<S>,
}

impl<S: Scalar> UNetGenerator<S> {
    pub fn new(spec: GeneratorSpec, rng: &mut ChaCha12Rng) -> crate::error::Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let dec = spec.decoder_channels();
        let w = spec.base_width;

        let stem = ConvBlock::new(ch[0], spec.in_channels, 1, true, rng);
        let mut mixes = Vec::new();
        let mut downs = Vec::new();
        for i in 0..5 {
            mixes.push(ConvBlock::new(ch[i], ch[i], 1, true, rng));
            downs.push(ConvBlock::new(ch[i + 1], ch[i], 2, true, rng));
        }
        let bottleneck = ConvBlock::new(ch[5], ch[5], 1, true, rng);
        // decoder blocks indexed by encoder stage i (0..5); executed 4 -> 0
        let mut up_convs = vec![];
        let mut fuses = vec![];
        for i in 0..5 {
            // input channels when arriving at stage i from below
            let cin = if i == 4 { ch[5] } else { dec[4 - (i + 1)] };
            let cout = dec[4 - i];
            up_convs.push(ConvBlock::new(cout, cin, 1, true, rng));
            fuses.push(ConvBlock::new(cout, cout + ch[i], 1, true, rng));
        }
        // the image head starts at full dynamic range; the scale head starts
        // flat so the initial scale map sits at softplus(bias) = 0.5
        let img_proj_std = 1.0 / ((9 * w) as f64).sqrt();
        let head_img = Head::new(w, spec.out_channels, rng, 0.0, img_proj_std);
        let head_sigma = Head::new(w, spec.out_channels, rng, SIGMA_HEAD_BIAS, 0.02);
        Ok(UNetGenerator {
            spec,
            stem,
            mixes,
            downs,
            bottleneck,
            up_convs,
            fuses,
            head_img,
            head_sigma,
        })
    }

    fn check_input(&self, x: &Array4<S>) {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.spec.in_channels, "input channel mismatch");
        assert!(
            h == self.spec.d && w == self.spec.d,
            "generator built for d={}, got {}x{}",
            self.spec.d,
            h,
            w
        );
    }

    fn trunk_forward(&self, x: &Array4<S>) -> Array4<S> {
        let mut t = self.stem.forward(x);
        let mut skips = Vec::with_capacity(5);
        for i in 0..5 {
            let m = self.mixes[i].forward(&t);
            t = self.downs[i].forward(&m);
            skips.push(m);
        }
        t = self.bottleneck.forward(&t);
        for i in (0..5).rev() {
            let u = upsample2x(&t);
            let u = self.up_convs[i].forward(&u);
            let cat = concat_channels(&u, &skips[i]);
            t = self.fuses[i].forward(&cat);
        }
        t
    }
}

impl<S: Scalar> GeneratorModel<S> for UNetGenerator<S> {
    type Cache = UNetCache<S>;

    fn forward(&self, x: &Array4<S>) -> GenOut<S> {
        self.check_input(x);
        let t = self.trunk_forward(x);
        let image = tanh_forward(&self.head_img.forward(&t));
        let scale = softplus_floor_forward(&self.head_sigma.forward(&t), self.spec.sigma_min);
        GenOut { image, scale }
    }

    fn forward_image(&self, x: &Array4<S>) -> Array4<S> {
        self.check_input(x);
        let t = self.trunk_forward(x);
        tanh_forward(&self.head_img.forward(&t))
    }

    fn forward_cached(&self, x: &Array4<S>) -> (GenOut<S>, UNetCache<S>) {
        self.check_input(x);
        let (mut t, stem_c) = self.stem.forward_cached(x);
        let mut mixes_c = Vec::with_capacity(5);
        let mut downs_c = Vec::with_capacity(5);
        let mut skips = Vec::with_capacity(5);
        for i in 0..5 {
            let (m, mc) = self.mixes[i].forward_cached(&t);
            let (dn, dc) = self.downs[i].forward_cached(&m);
            t = dn;
            mixes_c.push(mc);
            downs_c.push(dc);
            skips.push(m);
        }
        let (bt, bc) = self.bottleneck.forward_cached(&t);
        t = bt;
        let mut up_convs_c: Vec<Option<ConvBlockCache<S>>> = (0..5).map(|_| None).collect();
        let mut fuses_c: Vec<Option<ConvBlockCache<S>>> = (0..5).map(|_| None).collect();
        for i in (0..5).rev() {
            let u = upsample2x(&t);
            let (uc_out, uc) = self.up_convs[i].forward_cached(&u);
            let cat = concat_channels(&uc_out, &skips[i]);
            let (f_out, fc) = self.fuses[i].forward_cached(&cat);
            t = f_out;
            up_convs_c[i] = Some(uc);
            fuses_c[i] = Some(fc);
        }
        let (img_pre, hic) = self.head_img.forward_cached(&t);
        let (sig_pre, hsc) = self.head_sigma.forward_cached(&t);
        let image = tanh_forward(&img_pre);
        let scale = softplus_floor_forward(&sig_pre, self.spec.sigma_min);
        (
            GenOut { image, scale },
            UNetCache {
                stem: stem_c,
                mixes: mixes_c,
                downs: downs_c,
                bottleneck: bc,
                up_convs: up_convs_c.into_iter().map(Option::unwrap).collect(),
                fuses: fuses_c.into_iter().map(Option::unwrap).collect(),
                head_img: hic,
                head_sigma: hsc,
            },
        )
    }

    fn backward(&mut self, cache: &UNetCache<S>, d_image: &Array4<S>, d_scale: &Array4<S>) {
        // through the output activations
        let d_img_pre = tanh_backward(&cache.head_img.pre_act, d_image);
        let d_sig_pre =
            softplus_floor_backward(&cache.head_sigma.pre_act, d_scale, self.spec.sigma_min);
        let dt_img = self.head_img.backward(&cache.head_img, &d_img_pre);
        let dt_sig = self.head_sigma.backward(&cache.head_sigma, &d_sig_pre);
        let mut dt = &dt_img + &dt_sig;
        // decoder, shallowest first (reverse of execution order)
        let mut d_skips: Vec<Option<Array4<S>>> = (0..5).map(|_| None).collect();
        for i in 0..5 {
            let cout = self.fuses[i].conv.out_channels();
            let dcat = self.fuses[i].backward(&cache.fuses[i], &dt);
            let (du, dskip) = split_channels(&dcat, cout);
            d_skips[i] = Some(dskip);
            let du = self.up_convs[i].backward(&cache.up_convs[i], &du);
            dt = upsample2x_backward(&du);
        }
        dt = self.bottleneck.backward(&cache.bottleneck, &dt);
        for i in (0..5).rev() {
            let mut dm = self.downs[i].backward(&cache.downs[i], &dt);
            dm += d_skips[i].as_ref().unwrap();
            dt = self.mixes[i].backward(&cache.mixes[i], &dm);
        }
        let _ = self.stem.backward(&cache.stem, &dt);
    }

    fn out_channels(&self) -> usize {
        self.spec.out_channels
    }
}

impl<S: Scalar> ParamSet<S> for UNetGenerator<S> {
    fn for_each_param(&self, f: &mut dyn FnMut(&[S])) {
        self.stem.for_each_param(f);
        for i in 0..5 {
            self.mixes[i].for_each_param(f);
            self.downs[i].for_each_param(f);
        }
        self.bottleneck.for_each_param(f);
        for i in (0..5).rev() {
            self.up_convs[i].for_each_param(f);
            self.fuses[i].for_each_param(f);
        }
        self.head_img.block.for_each_param(f);
        f(self.head_img.out.w.as_slice().unwrap());
        f(self.head_img.out.b.as_slice().unwrap());
        self.head_sigma.block.for_each_param(f);
        f(self.head_sigma.out.w.as_slice().unwrap());
        f(self.head_sigma.out.b.as_slice().unwrap());
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut [S])) {
        self.stem.for_each_param_mut(f);
        for i in 0..5 {
            self.mixes[i].for_each_param_mut(f);
            self.downs[i].for_each_param_mut(f);
        }
        self.bottleneck.for_each_param_mut(f);
        for i in (0..5).rev() {
            self.up_convs[i].for_each_param_mut(f);
            self.fuses[i].for_each_param_mut(f);
        }
        self.head_img.block.for_each_param_mut(f);
        f(self.head_img.out.w.as_slice_mut().unwrap());
        f(self.head_img.out.b.as_slice_mut().unwrap());
        self.head_sigma.block.for_each_param_mut(f);
        f(self.head_sigma.out.w.as_slice_mut().unwrap());
        f(self.head_sigma.out.b.as_slice_mut().unwrap());
    }

    fn for_each_grad(&self, f: &mut dyn FnMut(&[S])) {
        self.stem.for_each_grad(f);
        for i in 0..5 {
            self.mixes[i].for_each_grad(f);
            self.downs[i].for_each_grad(f);
        }
        self.bottleneck.for_each_grad(f);
        for i in (0..5).rev() {
            self.up_convs[i].for_each_grad(f);
            self.fuses[i].for_each_grad(f);
        }
        self.head_img.block.for_each_grad(f);
        f(self.head_img.out.w_grad.as_slice().unwrap());
        f(self.head_img.out.b_grad.as_slice().unwrap());
        self.head_sigma.block.for_each_grad(f);
        f(self.head_sigma.out.w_grad.as_slice().unwrap());
        f(self.head_sigma.out.b_grad.as_slice().unwrap());
    }

    fn for_each_param_and_grad_mut(&mut self, f: &mut dyn FnMut(&mut [S], &[S])) {
        self.stem.for_each_pg_mut(f);
        for i in 0..5 {
            self.mixes[i].for_each_pg_mut(f);
            self.downs[i].for_each_pg_mut(f);
        }
        self.bottleneck.for_each_pg_mut(f);
        for i in (0..5).rev() {
            self.up_convs[i].for_each_pg_mut(f);
            self.fuses[i].for_each_pg_mut(f);
        }
        self.head_img.block.for_each_pg_mut(f);
        f(
            self.head_img.out.w.as_slice_mut().unwrap(),
            self.head_img.out.w_grad.as_slice().unwrap(),
        );
        f(
            self.head_img.out.b.as_slice_mut().unwrap(),
            self.head_img.out.b_grad.as_slice().unwrap(),
        );
        self.head_sigma.block.for_each_pg_mut(f);
        f(
            self.head_sigma.out.w.as_slice_mut().unwrap(),
            self.head_sigma.out.w_grad.as_slice().unwrap(),
        );
        f(
            self.head_sigma.out.b.as_slice_mut().unwrap(),
            self.head_sigma.out.b_grad.as_slice().unwrap(),
        );
    }

    fn zero_grads(&mut self) {
        self.stem.zero_grads();
        for i in 0..5 {
            self.mixes[i].zero_grads();
            self.downs[i].zero_grads();
        }
        self.bottleneck.zero_grads();
        for i in 0..5 {
            self.up_convs[i].zero_grads();
            self.fuses[i].zero_grads();
        }
        self.head_img.block.zero_grads();
        self.head_img.out.zero_grads();
        self.head_sigma.block.zero_grads();
        self.head_sigma.out.zero_grads();
    }
}
