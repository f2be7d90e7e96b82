//! 2-D convolution via im2col + GEMM, with reverse-mode and tangent-mode
//! passes.
//!
//! Feature maps are `[batch, channels, height, width]` in standard layout.
//! The tangent pass (`tangent_forward` / `tangent_backward_params`) exists for
//! the critic gradient penalty, which needs the parameter gradient of a
//! directional derivative of the critic output.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, Array4, ArrayView3, Axis, Zip};
use rayon::prelude::*;

use super::scalar::Scalar;

/// Output spatial size of a convolution pass.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Expand one sample into the im2col matrix `[ci*k*k, oh*ow]`.
fn im2col<S: Scalar>(
    x: &ArrayView3<S>,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<S>,
) {
    let (ci, h, w) = x.dim();
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    debug_assert_eq!(cols.dim(), (ci * k * k, oh * ow));
    let xs = x.as_slice().expect("input must be contiguous");
    let cs = cols.as_slice_mut().expect("cols must be contiguous");
    cs.fill(S::zero());
    for c in 0..ci {
        let xplane = &xs[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for o_i in 0..oh {
                    let ih = (o_i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = &xplane[ih as usize * w..(ih as usize + 1) * w];
                    let drow = &mut dst[o_i * ow..(o_i + 1) * ow];
                    for o_j in 0..ow {
                        let iw = (o_j * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            drow[o_j] = src_row[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the column matrix back to image layout.
fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<S> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let mut dx = Array3::<S>::zeros((ci, h, w));
    let ds = dcols.as_slice().expect("dcols contiguous");
    let out = dx.as_slice_mut().unwrap();
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &ds[row * oh * ow..(row + 1) * oh * ow];
                for o_i in 0..oh {
                    let ih = (o_i * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = c * h * w + ih as usize * w;
                    for o_j in 0..ow {
                        let iw = (o_j * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            out[base + iw as usize] = out[base + iw as usize] + src[o_i * ow + o_j];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Crossover between the direct shifted-row kernels and im2col + GEMM:
/// direct wins on wide rows, GEMM on deep low-resolution maps.
fn direct_is_faster(oh: usize, ow: usize) -> bool {
    oh * ow >= 1024 && ow >= 16
}

/// `dst[i, j] += w * src[i*stride + di, j*stride + dj]` over valid indices.
/// The stride-1 case reduces to contiguous row saxpys.
#[allow(clippy::too_many_arguments)]
fn accum_shifted<S: Scalar>(
    dst: &mut [S],
    dh: usize,
    dw: usize,
    src: &[S],
    sh: usize,
    sw: usize,
    w: S,
    di: isize,
    dj: isize,
    stride: usize,
) {
    for oi in 0..dh {
        let ii = (oi * stride) as isize + di;
        if ii < 0 || ii >= sh as isize {
            continue;
        }
        let srow = &src[ii as usize * sw..(ii as usize + 1) * sw];
        let drow = &mut dst[oi * dw..(oi + 1) * dw];
        if stride == 1 {
            let lo = (-dj).max(0) as usize;
            let hi = (sw as isize - dj).clamp(0, dw as isize) as usize;
            if lo >= hi {
                continue;
            }
            let d = &mut drow[lo..hi];
            let s = &srow[(lo as isize + dj) as usize..(hi as isize + dj) as usize];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv = *dv + w * *sv;
            }
        } else {
            for (oj, dv) in drow.iter_mut().enumerate() {
                let jj = (oj * stride) as isize + dj;
                if jj >= 0 && jj < sw as isize {
                    *dv = *dv + w * srow[jj as usize];
                }
            }
        }
    }
}

/// Adjoint of the strided case: `dst[i*stride+di, j*stride+dj] += w * src[i, j]`.
#[allow(clippy::too_many_arguments)]
fn scatter_shifted<S: Scalar>(
    dst: &mut [S],
    dh: usize,
    dw: usize,
    src: &[S],
    sh: usize,
    sw: usize,
    w: S,
    di: isize,
    dj: isize,
    stride: usize,
) {
    for oi in 0..sh {
        let ii = (oi * stride) as isize + di;
        if ii < 0 || ii >= dh as isize {
            continue;
        }
        let srow = &src[oi * sw..(oi + 1) * sw];
        let drow = &mut dst[ii as usize * dw..(ii as usize + 1) * dw];
        for (oj, sv) in srow.iter().enumerate() {
            let jj = (oj * stride) as isize + dj;
            if jj >= 0 && jj < dw as isize {
                drow[jj as usize] = drow[jj as usize] + w * *sv;
            }
        }
    }
}

/// `sum_i src_a[i*stride + di, j*stride + dj] * src_b[i, j]` over valid
/// indices; the correlation behind the weight gradient.
#[allow(clippy::too_many_arguments)]
fn dot_shifted<S: Scalar>(
    a: &[S],
    ah: usize,
    aw: usize,
    b: &[S],
    bh: usize,
    bw: usize,
    di: isize,
    dj: isize,
    stride: usize,
) -> S {
    let mut acc = S::zero();
    for oi in 0..bh {
        let ii = (oi * stride) as isize + di;
        if ii < 0 || ii >= ah as isize {
            continue;
        }
        let arow = &a[ii as usize * aw..(ii as usize + 1) * aw];
        let brow = &b[oi * bw..(oi + 1) * bw];
        if stride == 1 {
            let lo = (-dj).max(0) as usize;
            let hi = (aw as isize - dj).clamp(0, bw as isize) as usize;
            if lo >= hi {
                continue;
            }
            let av = &arow[(lo as isize + dj) as usize..(hi as isize + dj) as usize];
            let bv = &brow[lo..hi];
            for (x, y) in av.iter().zip(bv) {
                acc = acc + *x * *y;
            }
        } else {
            for (oj, bv) in brow.iter().enumerate() {
                let jj = (oj * stride) as isize + dj;
                if jj >= 0 && jj < aw as isize {
                    acc = acc + arow[jj as usize] * *bv;
                }
            }
        }
    }
    acc
}

/// Convolution layer with owned gradient buffers.
///
/// 3x3 kernels run through direct shifted-row kernels (the generator's hot
/// path); other kernel sizes go through im2col + GEMM.
#[derive(Clone)]
pub struct Conv2d<S> {
    pub w: Array4<S>, // [co, ci, k, k]
    pub b: Array1<S>, // [co]
    pub w_grad: Array4<S>,
    pub b_grad: Array1<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(co: usize, ci: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array4::zeros((co, ci, k, k)),
            b: Array1::zeros(co),
            w_grad: Array4::zeros((co, ci, k, k)),
            b_grad: Array1::zeros(co),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.w.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn wmat(&self) -> Array2<S> {
        let (co, ci, k, _) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((co, ci * k * k))
            .unwrap()
            .to_owned()
    }

    fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            conv_out_len(h, k, self.stride, self.pad),
            conv_out_len(w, k, self.stride, self.pad),
        )
    }

    /// Forward pass; `with_bias = false` is the tangent-mode variant.
    fn forward_impl(&self, x: &Array4<S>, with_bias: bool) -> Array4<S> {
        let (bsz, ci, h, w) = x.dim();
        debug_assert_eq!(ci, self.in_channels());
        let k = self.kernel();
        let (oh, ow) = self.out_shape(h, w);
        let co = self.out_channels();
        let n = oh * ow;
        let mut y = Array4::<S>::zeros((bsz, co, oh, ow));
        if k == 3 && direct_is_faster(oh, ow) {
            let ws = self.w.as_slice().unwrap();
            let pad = self.pad as isize;
            let stride = self.stride;
            Zip::from(y.outer_iter_mut())
                .and(x.outer_iter())
                .par_for_each(|mut yi, xi| {
                    let xs = xi.as_slice().expect("contiguous input");
                    let ys = yi.as_slice_mut().unwrap();
                    for c_out in 0..co {
                        let yplane = &mut ys[c_out * n..(c_out + 1) * n];
                        let init = if with_bias { self.b[c_out] } else { S::zero() };
                        yplane.fill(init);
                        for c_in in 0..ci {
                            let xplane = &xs[c_in * h * w..(c_in + 1) * h * w];
                            let wbase = (c_out * ci + c_in) * 9;
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    accum_shifted(
                                        yplane,
                                        oh,
                                        ow,
                                        xplane,
                                        h,
                                        w,
                                        ws[wbase + ki * 3 + kj],
                                        ki as isize - pad,
                                        kj as isize - pad,
                                        stride,
                                    );
                                }
                            }
                        }
                    }
                });
            return y;
        }
        let kk = ci * k * k;
        let wmat = self.wmat();
        Zip::from(y.outer_iter_mut())
            .and(x.outer_iter())
            .par_for_each(|yi, xi| {
                let mut cols = Array2::<S>::zeros((kk, n));
                im2col(&xi, k, self.stride, self.pad, &mut cols);
                let mut ymat = yi.into_shape_with_order((co, n)).unwrap();
                general_mat_mul(S::one(), &wmat, &cols, S::zero(), &mut ymat);
                if with_bias {
                    for (mut row, &bv) in ymat.outer_iter_mut().zip(self.b.iter()) {
                        row.mapv_inplace(|v| v + bv);
                    }
                }
            });
        y
    }

    pub fn forward(&self, x: &Array4<S>) -> Array4<S> {
        self.forward_impl(x, true)
    }

    /// Tangent (directional-derivative) forward: linear part only, no bias.
    pub fn tangent_forward(&self, xdot: &Array4<S>) -> Array4<S> {
        self.forward_impl(xdot, false)
    }

    /// Input gradient only; parameters untouched.
    pub fn backward_input(&self, dy: &Array4<S>, in_h: usize, in_w: usize) -> Array4<S> {
        let (bsz, co, oh, ow) = dy.dim();
        debug_assert_eq!(co, self.out_channels());
        let ci = self.in_channels();
        let k = self.kernel();
        let n = oh * ow;
        let mut dx = Array4::<S>::zeros((bsz, ci, in_h, in_w));
        if k == 3 && direct_is_faster(oh, ow) {
            let ws = self.w.as_slice().unwrap();
            let pad = self.pad as isize;
            let stride = self.stride;
            Zip::from(dx.outer_iter_mut())
                .and(dy.outer_iter())
                .par_for_each(|mut dxi, dyi| {
                    let dys = dyi.as_slice().expect("contiguous cotangent");
                    let dxs = dxi.as_slice_mut().unwrap();
                    for c_in in 0..ci {
                        let dxplane = &mut dxs[c_in * in_h * in_w..(c_in + 1) * in_h * in_w];
                        for c_out in 0..co {
                            let dyplane = &dys[c_out * n..(c_out + 1) * n];
                            let wbase = (c_out * ci + c_in) * 9;
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let wv = ws[wbase + ki * 3 + kj];
                                    let di = ki as isize - pad;
                                    let dj = kj as isize - pad;
                                    if stride == 1 {
                                        accum_shifted(
                                            dxplane, in_h, in_w, dyplane, oh, ow, wv, -di, -dj, 1,
                                        );
                                    } else {
                                        scatter_shifted(
                                            dxplane, in_h, in_w, dyplane, oh, ow, wv, di, dj,
                                            stride,
                                        );
                                    }
                                }
                            }
                        }
                    }
                });
            return dx;
        }
        let kk = ci * k * k;
        let wmat = self.wmat();
        Zip::from(dx.outer_iter_mut())
            .and(dy.outer_iter())
            .par_for_each(|mut dxi, dyi| {
                let dymat = dyi.into_shape_with_order((co, n)).unwrap();
                let mut dcols = Array2::<S>::zeros((kk, n));
                general_mat_mul(S::one(), &wmat.t(), &dymat, S::zero(), &mut dcols);
                let part = col2im(&dcols, ci, in_h, in_w, k, self.stride, self.pad);
                dxi.assign(&part);
            });
        dx
    }

    /// Full reverse pass: accumulates parameter gradients and returns the
    /// input gradient. `x` is the cached forward input (primal or tangent).
    fn backward_impl(&mut self, x: &Array4<S>, dy: &Array4<S>, with_bias: bool) -> Array4<S> {
        let (bsz, ci, h, w) = x.dim();
        let (_, co, oh, ow) = dy.dim();
        let k = self.kernel();
        let n = oh * ow;
        let stride = self.stride;
        let pad = self.pad;
        let parts: Vec<(Vec<S>, Array1<S>, Array3<S>)> = if k == 3 && direct_is_faster(oh, ow) {
            let ws = self.w.as_slice().unwrap();
            let padi = pad as isize;
            (0..bsz)
                .into_par_iter()
                .map(|i| {
                    let xi = x.index_axis(Axis(0), i);
                    let dyi = dy.index_axis(Axis(0), i);
                    let xs = xi.as_slice().expect("contiguous input");
                    let dys = dyi.as_slice().expect("contiguous cotangent");
                    let mut dwp = vec![S::zero(); co * ci * 9];
                    let mut dbp = Array1::<S>::zeros(co);
                    let mut dxi = Array3::<S>::zeros((ci, h, w));
                    let dxs = dxi.as_slice_mut().unwrap();
                    for c_out in 0..co {
                        let dyplane = &dys[c_out * n..(c_out + 1) * n];
                        if with_bias {
                            dbp[c_out] = dyplane.iter().fold(S::zero(), |a, &v| a + v);
                        }
                        for c_in in 0..ci {
                            let xplane = &xs[c_in * h * w..(c_in + 1) * h * w];
                            let dxplane = &mut dxs[c_in * h * w..(c_in + 1) * h * w];
                            let wbase = (c_out * ci + c_in) * 9;
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let di = ki as isize - padi;
                                    let dj = kj as isize - padi;
                                    dwp[wbase + ki * 3 + kj] = dwp[wbase + ki * 3 + kj]
                                        + dot_shifted(xplane, h, w, dyplane, oh, ow, di, dj, stride);
                                    let wv = ws[wbase + ki * 3 + kj];
                                    if stride == 1 {
                                        accum_shifted(
                                            dxplane, h, w, dyplane, oh, ow, wv, -di, -dj, 1,
                                        );
                                    } else {
                                        scatter_shifted(
                                            dxplane, h, w, dyplane, oh, ow, wv, di, dj, stride,
                                        );
                                    }
                                }
                            }
                        }
                    }
                    (dwp, dbp, dxi)
                })
                .collect()
        } else {
            let kk = ci * k * k;
            let wmat = self.wmat();
            (0..bsz)
                .into_par_iter()
                .map(|i| {
                    let xi = x.index_axis(Axis(0), i);
                    let dyi = dy.index_axis(Axis(0), i);
                    let dymat = dyi.into_shape_with_order((co, n)).unwrap();
                    let mut cols = Array2::<S>::zeros((kk, n));
                    im2col(&xi, k, stride, pad, &mut cols);
                    let mut dwp = Array2::<S>::zeros((co, kk));
                    general_mat_mul(S::one(), &dymat, &cols.t(), S::zero(), &mut dwp);
                    let dbp = if with_bias {
                        dymat.sum_axis(Axis(1))
                    } else {
                        Array1::zeros(co)
                    };
                    let mut dcols = Array2::<S>::zeros((kk, n));
                    general_mat_mul(S::one(), &wmat.t(), &dymat, S::zero(), &mut dcols);
                    let dxi = col2im(&dcols, ci, h, w, k, stride, pad);
                    (dwp.into_raw_vec_and_offset().0, dbp, dxi)
                })
                .collect()
        };
        let mut dx = Array4::<S>::zeros((bsz, ci, h, w));
        let gw = self.w_grad.as_slice_mut().unwrap();
        for (i, (dwp, dbp, dxi)) in parts.into_iter().enumerate() {
            for (g, d) in gw.iter_mut().zip(dwp.iter()) {
                *g = *g + *d;
            }
            if with_bias {
                self.b_grad += &dbp;
            }
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
        }
        dx
    }

    pub fn backward(&mut self, x: &Array4<S>, dy: &Array4<S>) -> Array4<S> {
        self.backward_impl(x, dy, true)
    }

    /// Reverse pass through the tangent graph: same weight sharing, no bias
    /// gradient (the bias has zero tangent).
    pub fn tangent_backward(&mut self, xdot: &Array4<S>, dydot: &Array4<S>) -> Array4<S> {
        self.backward_impl(xdot, dydot, false)
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

    fn fill_seq(a: &mut Array4<f64>) {
        let mut v = 0.1;
        for x in a.iter_mut() {
            *x = (v * 7.3_f64).sin();
            v += 1.0;
        }
    }

    #[test]
    fn conv_matches_direct_computation() {
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 1, 1);
        let mut v = 0.0;
        for x in conv.w.iter_mut() {
            *x = (v * 0.37_f64).cos();
            v += 1.0;
        }
        conv.b[0] = 0.5;
        conv.b[1] = -0.25;
        let mut x = Array4::<f64>::zeros((1, 3, 5, 5));
        fill_seq(&mut x);
        let y = conv.forward(&x);
        // direct convolution
        for co in 0..2 {
            for oi in 0..5 {
                for oj in 0..5 {
                    let mut acc = conv.b[co];
                    for ci in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = oi as isize + ki as isize - 1;
                                let jj = oj as isize + kj as isize - 1;
                                if ii >= 0 && ii < 5 && jj >= 0 && jj < 5 {
                                    acc += conv.w[[co, ci, ki, kj]]
                                        * x[[0, ci, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, co, oi, oj]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_strided_shapes() {
        let conv = Conv2d::<f32>::new(4, 2, 4, 2, 1);
        let x = Array4::<f32>::zeros((2, 2, 16, 16));
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (2, 4, 8, 8));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 1);
        let mut v = 0.0;
        for x in conv.w.iter_mut() {
            *x = (v * 0.61_f64).sin() * 0.5;
            v += 1.0;
        }
        conv.b[0] = 0.1;
        conv.b[1] = -0.2;
        let mut x = Array4::<f64>::zeros((2, 2, 6, 6));
        fill_seq(&mut x);
        // loss = sum(y * t) for a fixed t
        let y = conv.forward(&x);
        let mut t = y.clone();
        fill_seq(&mut t);
        conv.zero_grads();
        let dx = conv.backward(&x, &t);
        let h = 1e-6;
        // check a few weight coords
        for &idx in &[0usize, 7, 17, 35] {
            let mut cp = conv.clone();
            cp.w.as_slice_mut().unwrap()[idx] += h;
            let yp = cp.forward(&x);
            let mut cm = conv.clone();
            cm.w.as_slice_mut().unwrap()[idx] -= h;
            let ym = cm.forward(&x);
            let fd = ((&yp - &ym) * &t).sum() / (2.0 * h);
            let an = conv.w_grad.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "w[{idx}]: fd={fd} an={an}");
        }
        // input coords
        for &idx in &[0usize, 13, 40, 71] {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let yp = conv.forward(&xp);
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= h;
            let ym = conv.forward(&xm);
            let fd = ((&yp - &ym) * &t).sum() / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "x[{idx}]: fd={fd} an={an}");
        }
        // bias
        let mut cp = conv.clone();
        cp.b[1] += h;
        let yp = cp.forward(&x);
        let mut cm = conv.clone();
        cm.b[1] -= h;
        let ym = cm.forward(&x);
        let fd = ((&yp - &ym) * &t).sum() / (2.0 * h);
        assert!((fd - conv.b_grad[1]).abs() < 1e-6);
    }

    #[test]
    fn tangent_forward_is_directional_derivative() {
        let mut conv = Conv2d::<f64>::new(3, 2, 3, 1, 1);
        let mut v = 0.0;
        for x in conv.w.iter_mut() {
            *x = (v * 0.29_f64).cos() * 0.3;
            v += 1.0;
        }
        conv.b.fill(0.7);
        let mut x = Array4::<f64>::zeros((1, 2, 5, 5));
        let mut d = Array4::<f64>::zeros((1, 2, 5, 5));
        fill_seq(&mut x);
        for (i, e) in d.iter_mut().enumerate() {
            *e = ((i as f64) * 0.11).sin();
        }
        let h = 1e-6;
        let yp = conv.forward(&(&x + &(&d * h)));
        let ym = conv.forward(&(&x - &(&d * h)));
        let fd = (&yp - &ym) / (2.0 * h);
        let ydot = conv.tangent_forward(&d);
        for (a, b) in fd.iter().zip(ydot.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}
