//! Pointwise and structural layers used by the generator and critic.

use ndarray::{Array1, Array2, Array4, Axis};
use rayon::prelude::*;

use super::scalar::Scalar;

/// Leaky rectifier. The mask depends only on the sign of the cached primal
/// input, so the tangent pass reuses it unchanged.
#[derive(Clone)]
pub struct LeakyRelu {
    pub slope: f64,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope }
    }

    pub fn forward<S: Scalar>(&self, x: &Array4<S>) -> Array4<S> {
        let a = S::from_f64(self.slope);
        x.mapv(|v| if v > S::zero() { v } else { a * v })
    }

    /// Multiply by the activation mask of `x_primal` (shared by the reverse
    /// and tangent passes).
    pub fn masked<S: Scalar>(&self, x_primal: &Array4<S>, g: &Array4<S>) -> Array4<S> {
        let a = S::from_f64(self.slope);
        let mut out = g.clone();
        out.zip_mut_with(x_primal, |gv, &xv| {
            if xv <= S::zero() {
                *gv = *gv * a;
            }
        });
        out
    }
}

/// Instance normalization with affine parameters.
///
/// Normalization statistics are only meaningful with a few spatial positions;
/// below `MIN_SPATIAL` the layer degrades to the affine map alone so that the
/// same parameter set serves every admissible image size.
#[derive(Clone)]
pub struct InstanceNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub gamma_grad: Array1<S>,
    pub beta_grad: Array1<S>,
    pub eps: f64,
}

pub const MIN_SPATIAL: usize = 4;

impl<S: Scalar> InstanceNorm<S> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            gamma_grad: Array1::zeros(channels),
            beta_grad: Array1::zeros(channels),
            eps: 1e-5,
        }
    }

    pub fn param_len(&self) -> usize {
        self.gamma.len() * 2
    }

    fn normalizes(&self, h: usize, w: usize) -> bool {
        h * w >= MIN_SPATIAL
    }

    pub fn forward(&self, x: &Array4<S>) -> Array4<S> {
        let (b, c, h, w) = x.dim();
        let mut y = Array4::zeros((b, c, h, w));
        let n = h * w;
        let m = S::from_f64(n as f64);
        let eps = S::from_f64(self.eps);
        let norm = self.normalizes(h, w);
        let xs = x.as_slice().expect("contiguous input");
        let ys = y.as_slice_mut().unwrap();
        ys.par_chunks_mut(n)
            .zip(xs.par_chunks(n))
            .enumerate()
            .for_each(|(plane, (yp, xp))| {
                let ci = plane % c;
                let g = self.gamma[ci];
                let be = self.beta[ci];
                if norm {
                    let mean = xp.iter().fold(S::zero(), |a, &v| a + v) / m;
                    let var = xp
                        .iter()
                        .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / m;
                    let inv = S::one() / (var + eps).sqrt();
                    let gi = g * inv;
                    let off = be - gi * mean;
                    for (yv, &xv) in yp.iter_mut().zip(xp) {
                        *yv = gi * xv + off;
                    }
                } else {
                    for (yv, &xv) in yp.iter_mut().zip(xp) {
                        *yv = g * xv + be;
                    }
                }
            });
        y
    }

    pub fn backward(&mut self, x: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
        let (b, c, h, w) = x.dim();
        let mut dx = Array4::zeros((b, c, h, w));
        let n = h * w;
        let m = S::from_f64(n as f64);
        let eps = S::from_f64(self.eps);
        let norm = self.normalizes(h, w);
        let xs = x.as_slice().expect("contiguous input");
        let dys = dy.as_slice().expect("contiguous cotangent");
        let dxs = dx.as_slice_mut().unwrap();
        let gamma = &self.gamma;
        // per-plane affine-gradient contributions, folded in order afterwards
        let contribs: Vec<(S, S)> = dxs
            .par_chunks_mut(n)
            .enumerate()
            .map(|(plane, dxp)| {
                let ci = plane % c;
                let xp = &xs[plane * n..(plane + 1) * n];
                let dyp = &dys[plane * n..(plane + 1) * n];
                let g = gamma[ci];
                if norm {
                    let mean = xp.iter().fold(S::zero(), |a, &v| a + v) / m;
                    let var = xp
                        .iter()
                        .fold(S::zero(), |a, &v| a + (v - mean) * (v - mean))
                        / m;
                    let inv = S::one() / (var + eps).sqrt();
                    let mut sum_dy = S::zero();
                    let mut sum_dy_xhat = S::zero();
                    for (&dv, &xv) in dyp.iter().zip(xp) {
                        sum_dy = sum_dy + dv;
                        sum_dy_xhat = sum_dy_xhat + dv * ((xv - mean) * inv);
                    }
                    let mean_dy = sum_dy / m;
                    let mean_dy_xhat = sum_dy_xhat / m;
                    let gi = g * inv;
                    for ((dxv, &dv), &xv) in dxp.iter_mut().zip(dyp).zip(xp) {
                        let xhat = (xv - mean) * inv;
                        *dxv = gi * (dv - mean_dy - xhat * mean_dy_xhat);
                    }
                    (sum_dy, sum_dy_xhat)
                } else {
                    let mut sum_dy = S::zero();
                    let mut sum_dy_x = S::zero();
                    for (&dv, &xv) in dyp.iter().zip(xp) {
                        sum_dy = sum_dy + dv;
                        sum_dy_x = sum_dy_x + dv * xv;
                    }
                    for (dxv, &dv) in dxp.iter_mut().zip(dyp) {
                        *dxv = g * dv;
                    }
                    (sum_dy, sum_dy_x)
                }
            })
            .collect();
        for (plane, (sum_dy, sum_dy_x)) in contribs.into_iter().enumerate() {
            let ci = plane % c;
            self.beta_grad[ci] = self.beta_grad[ci] + sum_dy;
            self.gamma_grad[ci] = self.gamma_grad[ci] + sum_dy_x;
        }
        dx
    }

    pub fn zero_grads(&mut self) {
        self.gamma_grad.fill(S::zero());
        self.beta_grad.fill(S::zero());
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    let xs = x.as_slice().expect("contiguous input");
    let ys = y.as_slice_mut().unwrap();
    let w2 = 2 * w;
    for bc in 0..b * c {
        let xp = &xs[bc * h * w..(bc + 1) * h * w];
        let yp = &mut ys[bc * 4 * h * w..(bc + 1) * 4 * h * w];
        for i in 0..h {
            let xrow = &xp[i * w..(i + 1) * w];
            let rows = &mut yp[2 * i * w2..(2 * i + 2) * w2];
            let (top, bottom) = rows.split_at_mut(w2);
            for (j, &v) in xrow.iter().enumerate() {
                top[2 * j] = v;
                top[2 * j + 1] = v;
            }
            bottom.copy_from_slice(top);
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: sum each 2x2 block.
pub fn upsample2x_backward<S: Scalar>(dy: &Array4<S>) -> Array4<S> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    let dys = dy.as_slice().expect("contiguous cotangent");
    let dxs = dx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        let yp = &dys[bc * h2 * w2..(bc + 1) * h2 * w2];
        let xp = &mut dxs[bc * h * w..(bc + 1) * h * w];
        for i in 0..h {
            let top = &yp[2 * i * w2..(2 * i + 1) * w2];
            let bottom = &yp[(2 * i + 1) * w2..(2 * i + 2) * w2];
            let xrow = &mut xp[i * w..(i + 1) * w];
            for (j, xv) in xrow.iter_mut().enumerate() {
                *xv = top[2 * j] + top[2 * j + 1] + bottom[2 * j] + bottom[2 * j + 1];
            }
        }
    }
    dx
}

/// Concatenate two feature maps along the channel axis (standard layout).
pub fn concat_channels<S: Scalar>(a: &Array4<S>, b: &Array4<S>) -> Array4<S> {
    let (n, ca, h, w) = a.dim();
    let cb = b.dim().1;
    debug_assert_eq!((n, h, w), (b.dim().0, b.dim().2, b.dim().3));
    let mut out = Array4::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

/// Split a channel-axis gradient back into the two concatenated parts.
pub fn split_channels<S: Scalar>(g: &Array4<S>, c_first: usize) -> (Array4<S>, Array4<S>) {
    let a = g.slice(ndarray::s![.., ..c_first, .., ..]).to_owned();
    let b = g.slice(ndarray::s![.., c_first.., .., ..]).to_owned();
    (a, b)
}

/// Hyperbolic tangent output activation.
pub fn tanh_forward<S: Scalar>(x: &Array4<S>) -> Array4<S> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<S: Scalar>(x: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &xv| {
        let t = xv.tanh();
        *g = *g * (S::one() - t * t);
    });
    dx
}

/// Numerically stable softplus with a hard floor, used by the scale head.
pub fn softplus_floor_forward<S: Scalar>(x: &Array4<S>, sigma_min: f64) -> Array4<S> {
    let floor = S::from_f64(sigma_min);
    x.mapv(|v| {
        let sp = softplus_scalar(v);
        if sp > floor {
            sp
        } else {
            floor
        }
    })
}

pub fn softplus_floor_backward<S: Scalar>(
    x: &Array4<S>,
    dy: &Array4<S>,
    sigma_min: f64,
) -> Array4<S> {
    let floor = S::from_f64(sigma_min);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &xv| {
        let sp = softplus_scalar(xv);
        if sp > floor {
            // d softplus / dx = sigmoid(x)
            let sig = S::one() / (S::one() + (-xv).exp());
            *g = *g * sig;
        } else {
            *g = S::zero();
        }
    });
    dx
}

#[inline]
pub fn softplus_scalar<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Mean over the spatial axes: `[b, c, h, w] -> [b, c]`.
pub fn global_mean<S: Scalar>(x: &Array4<S>) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    let m = S::from_f64((h * w) as f64);
    let mut y = Array2::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            y[[bi, ci]] = plane.index_axis(Axis(0), ci).sum() / m;
        }
    }
    y
}

pub fn global_mean_backward<S: Scalar>(
    dy: &Array2<S>,
    h: usize,
    w: usize,
) -> Array4<S> {
    let (b, c) = dy.dim();
    let m = S::from_f64((h * w) as f64);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let v = dy[[bi, ci]] / m;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(v);
        }
    }
    dx
}

/// Dense layer mapping `[b, in] -> [b, out]`.
#[derive(Clone)]
pub struct Linear<S> {
    pub w: Array2<S>, // [out, in]
    pub b: Array1<S>,
    pub w_grad: Array2<S>,
    pub b_grad: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(out: usize, input: usize) -> Self {
        Linear {
            w: Array2::zeros((out, input)),
            b: Array1::zeros(out),
            w_grad: Array2::zeros((out, input)),
            b_grad: Array1::zeros(out),
        }
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.outer_iter_mut() {
            row += &self.b;
        }
        y
    }

    /// Linear part only (tangent mode: bias contributes nothing).
    pub fn tangent_forward(&self, xdot: &Array2<S>) -> Array2<S> {
        xdot.dot(&self.w.t())
    }

    pub fn backward_input(&self, dy: &Array2<S>) -> Array2<S> {
        dy.dot(&self.w)
    }

    pub fn backward(&mut self, x: &Array2<S>, dy: &Array2<S>, with_bias: bool) -> Array2<S> {
        self.w_grad += &dy.t().dot(x);
        if with_bias {
            self.b_grad += &dy.sum_axis(Axis(0));
        }
        self.backward_input(dy)
    }

    pub fn zero_grads(&mut self) {
        self.w_grad.fill(S::zero());
        self.b_grad.fill(S::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn instance_norm_normalizes_and_matches_fd() {
        let mut layer = InstanceNorm::<f64>::new(2);
        layer.gamma[0] = 1.3;
        layer.gamma[1] = 0.8;
        layer.beta[0] = -0.2;
        layer.beta[1] = 0.5;
        let mut x = Array4::<f64>::zeros((1, 2, 4, 4));
        for (i, v) in x.iter_mut().enumerate() {
            *v = (i as f64 * 0.7).sin() * 2.0;
        }
        let y = layer.forward(&x);
        // normalized channel has mean beta and std ~ gamma
        let ch0 = y.index_axis(Axis(0), 0);
        let ch0 = ch0.index_axis(Axis(0), 0);
        let mean: f64 = ch0.sum() / 16.0;
        assert!((mean - (-0.2)).abs() < 1e-9);

        // finite-difference input gradient
        let t = x.mapv(|v| (v * 3.1).cos());
        layer.zero_grads();
        let dx = layer.backward(&x, &t);
        let h = 1e-6;
        for &idx in &[0usize, 5, 17, 30] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = ((&layer.forward(&xp) - &layer.forward(&xm)) * &t).sum() / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_small_spatial_is_affine() {
        let layer = InstanceNorm::<f64>::new(1);
        let x = Array4::<f64>::from_elem((1, 1, 1, 1), 3.0);
        let y = layer.forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 3.0); // gamma=1, beta=0
    }

    #[test]
    fn upsample_roundtrip_adjoint() {
        // <P(x), y> == <x, P^T(y)>
        let mut x = Array4::<f64>::zeros((1, 1, 3, 3));
        let mut y = Array4::<f64>::zeros((1, 1, 6, 6));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64 + 1.0;
        }
        for (i, v) in y.iter_mut().enumerate() {
            *v = (i as f64 * 0.3).sin();
        }
        let px = upsample2x(&x);
        let pty = upsample2x_backward(&y);
        let lhs: f64 = (&px * &y).sum();
        let rhs: f64 = (&x * &pty).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softplus_floor_behaviour() {
        let x = Array4::<f64>::from_elem((1, 1, 1, 1), 0.0);
        let y = softplus_floor_forward(&x, 1e-3);
        assert!((y[[0, 0, 0, 0]] - 2f64.ln()).abs() < 1e-12);
        let x = Array4::<f64>::from_elem((1, 1, 1, 1), -20.0);
        let y = softplus_floor_forward(&x, 1e-3);
        assert_eq!(y[[0, 0, 0, 0]], 1e-3);
        let dy = Array4::<f64>::from_elem((1, 1, 1, 1), 1.0);
        let dx = softplus_floor_backward(&x, &dy, 1e-3);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }
}
