//! The random patch operator: admissible patch selection, cropping, and
//! bicubic resampling back to full resolution.
//!
//! The resampling convention is normative for the whole crate: Catmull-Rom
//! cubic kernel (a = -0.5), half-pixel coordinate mapping
//! `src = (dst + 0.5) * s / d - 0.5`, edge clamping, no antialiasing. The
//! operator is linear in the pixel values, so its Jacobian-vector product is
//! the operator itself and its adjoint is an exact scatter of the same
//! weights.

use ndarray::{s, Array3, Array4, Zip};
use rand::RngExt;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Admissible patch parameters `(rho, j1, j2)` for side length `d`.
///
/// `j1` is the row offset, `j2` the column offset; the realized patch side is
/// `floor(rho * d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    pub rho: f64,
    pub j1: usize,
    pub j2: usize,
    pub d: usize,
}

impl PatchConfig {
    pub fn new(rho: f64, j1: usize, j2: usize, d: usize) -> Result<Self> {
        let cfg = PatchConfig { rho, j1, j2, d };
        let fail = |reason| Error::InvalidPatchConfig {
            rho,
            j1,
            j2,
            d,
            reason,
        };
        if !(0.7..=1.0).contains(&rho) {
            return Err(fail("rho outside [0.7, 1.0]"));
        }
        let s = cfg.side();
        if s < 1 {
            return Err(fail("patch side floor(rho*d) < 1"));
        }
        if j1 + s > d || j2 + s > d {
            return Err(fail("offset + side exceeds image bounds"));
        }
        Ok(cfg)
    }

    /// Realized patch side `floor(rho * d)`.
    pub fn side(&self) -> usize {
        (self.rho * self.d as f64).floor() as usize
    }

    /// Identity configuration (full image, no resampling effect).
    pub fn identity(d: usize) -> Self {
        PatchConfig {
            rho: 1.0,
            j1: 0,
            j2: 0,
            d,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.side() == self.d
    }
}

/// Draw a patch configuration: `rho ~ U[0.7, 1.0]`, offsets uniform over the
/// admissible integer range. Advancing the RNG is the only side effect.
pub fn sample_patch_config(rng: &mut ChaCha12Rng, d: usize) -> PatchConfig {
    assert!(d >= 2, "side length must be at least 2");
    let rho: f64 = rng.random_range(0.7..=1.0);
    let s = (rho * d as f64).floor() as usize;
    let max_off = d - s;
    let j1 = rng.random_range(0..=max_off);
    let j2 = rng.random_range(0..=max_off);
    PatchConfig { rho, j1, j2, d }
}

/// Cubic convolution kernel with a = -0.5 (Catmull-Rom / Keys).
fn cubic_kernel(x: f64) -> f64 {
    let a = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * (x * x * x - 5.0 * x * x + 8.0 * x - 4.0)
    } else {
        0.0
    }
}

/// Precomputed taps and weights for one resampling axis (`src -> dst`).
struct ResizePlan {
    taps: Vec<[usize; 4]>,
    weights: Vec<[f64; 4]>,
}

fn resize_plan(src: usize, dst: usize) -> ResizePlan {
    let ratio = src as f64 / dst as f64;
    let mut taps = Vec::with_capacity(dst);
    let mut weights = Vec::with_capacity(dst);
    for o in 0..dst {
        let pos = (o as f64 + 0.5) * ratio - 0.5;
        let i0 = pos.floor();
        let t = pos - i0;
        let idx = |k: i64| -> usize {
            let i = i0 as i64 + k;
            i.clamp(0, src as i64 - 1) as usize
        };
        taps.push([idx(-1), idx(0), idx(1), idx(2)]);
        weights.push([
            cubic_kernel(1.0 + t),
            cubic_kernel(t),
            cubic_kernel(1.0 - t),
            cubic_kernel(2.0 - t),
        ]);
    }
    ResizePlan { taps, weights }
}

/// Separable bicubic resize of a `[c, s, s]` block to `[c, d, d]`.
/// Vertical pass first, then horizontal.
fn resize_bicubic<S: Scalar>(block: &Array3<S>, d: usize) -> Array3<S> {
    let (c, sh, sw) = block.dim();
    let vplan = resize_plan(sh, d);
    let hplan = resize_plan(sw, d);
    // vertical: [c, sh, sw] -> [c, d, sw]
    let mut mid = Array3::<S>::zeros((c, d, sw));
    for ci in 0..c {
        for o in 0..d {
            let tps = &vplan.taps[o];
            let ws = &vplan.weights[o];
            for j in 0..sw {
                let mut acc = S::zero();
                for k in 0..4 {
                    acc = acc + S::from_f64(ws[k]) * block[[ci, tps[k], j]];
                }
                mid[[ci, o, j]] = acc;
            }
        }
    }
    // horizontal: [c, d, sw] -> [c, d, d]
    let mut out = Array3::<S>::zeros((c, d, d));
    for ci in 0..c {
        for i in 0..d {
            for o in 0..d {
                let tps = &hplan.taps[o];
                let ws = &hplan.weights[o];
                let mut acc = S::zero();
                for k in 0..4 {
                    acc = acc + S::from_f64(ws[k]) * mid[[ci, i, tps[k]]];
                }
                out[[ci, i, o]] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bicubic`]: scatter `[c, d, d]` back to `[c, sh, sw]`.
fn resize_bicubic_adjoint<S: Scalar>(g: &Array3<S>, sh: usize, sw: usize) -> Array3<S> {
    let (c, d, _) = g.dim();
    let vplan = resize_plan(sh, d);
    let hplan = resize_plan(sw, d);
    // adjoint horizontal: [c, d, d] -> [c, d, sw]
    let mut mid = Array3::<S>::zeros((c, d, sw));
    for ci in 0..c {
        for i in 0..d {
            for o in 0..d {
                let tps = &hplan.taps[o];
                let ws = &hplan.weights[o];
                let gv = g[[ci, i, o]];
                for k in 0..4 {
                    mid[[ci, i, tps[k]]] = mid[[ci, i, tps[k]]] + S::from_f64(ws[k]) * gv;
                }
            }
        }
    }
    // adjoint vertical: [c, d, sw] -> [c, sh, sw]
    let mut out = Array3::<S>::zeros((c, sh, sw));
    for ci in 0..c {
        for o in 0..d {
            let tps = &vplan.taps[o];
            let ws = &vplan.weights[o];
            for j in 0..sw {
                let gv = mid[[ci, o, j]];
                for k in 0..4 {
                    out[[ci, tps[k], j]] = out[[ci, tps[k], j]] + S::from_f64(ws[k]) * gv;
                }
            }
        }
    }
    out
}

/// Apply the patch operator to one `[c, d, d]` image: crop at
/// `(j1, j2)` with side `floor(rho*d)`, then resample back to `d x d`.
pub fn apply_patch<S: Scalar>(cfg: &PatchConfig, img: &Array3<S>) -> Array3<S> {
    let (_, h, w) = img.dim();
    assert!(
        h == cfg.d && w == cfg.d,
        "patch config is for d={} but image is {}x{}",
        cfg.d,
        h,
        w
    );
    let side = cfg.side();
    if cfg.is_identity() && cfg.j1 == 0 && cfg.j2 == 0 {
        return img.clone();
    }
    let crop = img
        .slice(s![.., cfg.j1..cfg.j1 + side, cfg.j2..cfg.j2 + side])
        .to_owned();
    resize_bicubic(&crop, cfg.d)
}

/// Adjoint of [`apply_patch`]: maps a full-size cotangent back onto the
/// image, zero outside the crop window.
pub fn apply_patch_vjp<S: Scalar>(cfg: &PatchConfig, grad_out: &Array3<S>) -> Array3<S> {
    let (c, h, w) = grad_out.dim();
    assert!(h == cfg.d && w == cfg.d, "gradient shape mismatch");
    let side = cfg.side();
    if cfg.is_identity() && cfg.j1 == 0 && cfg.j2 == 0 {
        return grad_out.clone();
    }
    let back = resize_bicubic_adjoint(grad_out, side, side);
    let mut full = Array3::<S>::zeros((c, h, w));
    full.slice_mut(s![.., cfg.j1..cfg.j1 + side, cfg.j2..cfg.j2 + side])
        .assign(&back);
    full
}

/// Elementwise batched patch application; one config per batch element.
pub fn apply_patch_batch<S: Scalar>(cfgs: &[PatchConfig], batch: &Array4<S>) -> Array4<S> {
    assert_eq!(
        cfgs.len(),
        batch.dim().0,
        "one patch config per batch element"
    );
    let mut out = Array4::<S>::zeros(batch.raw_dim());
    Zip::from(out.outer_iter_mut())
        .and(batch.outer_iter())
        .and(&ndarray::Array1::from_iter(0..cfgs.len()))
        .par_for_each(|mut o, x, &i| {
            o.assign(&apply_patch(&cfgs[i], &x.to_owned()));
        });
    out
}

/// Batched adjoint, mirroring [`apply_patch_batch`].
pub fn apply_patch_batch_vjp<S: Scalar>(cfgs: &[PatchConfig], grads: &Array4<S>) -> Array4<S> {
    assert_eq!(cfgs.len(), grads.dim().0);
    let mut out = Array4::<S>::zeros(grads.raw_dim());
    Zip::from(out.outer_iter_mut())
        .and(grads.outer_iter())
        .and(&ndarray::Array1::from_iter(0..cfgs.len()))
        .par_for_each(|mut o, g, &i| {
            o.assign(&apply_patch_vjp(&cfgs[i], &g.to_owned()));
        });
    out
}

/// Nearest-neighbour downsample to `side x side` via the inverse half-pixel
/// mapping. Used by the crop-consistency sanity check.
pub fn nn_downsample<S: Scalar>(img: &Array3<S>, side: usize) -> Array3<S> {
    let (c, h, _) = img.dim();
    let ratio = h as f64 / side as f64;
    let mut out = Array3::<S>::zeros((c, side, side));
    let pick = |o: usize| -> usize {
        (((o as f64 + 0.5) * ratio).floor() as usize).min(h - 1)
    };
    for ci in 0..c {
        for i in 0..side {
            for j in 0..side {
                out[[ci, i, j]] = img[[ci, pick(i), pick(j)]];
            }
        }
    }
    out
}

/// Expected offset range for a given `rho` and `d`: `0 ..= d - floor(rho*d)`.
pub fn admissible_offset_max(rho: f64, d: usize) -> usize {
    d - (rho * d as f64).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use rand::SeedableRng;

    #[test]
    fn config_validation() {
        assert!(PatchConfig::new(1.0, 0, 0, 256).is_ok());
        // rho=1.0 leaves zero slack: any nonzero offset is inadmissible
        assert!(PatchConfig::new(1.0, 1, 0, 256).is_err());
        assert!(PatchConfig::new(0.5, 0, 0, 256).is_err());
        assert!(PatchConfig::new(0.7, 78, 0, 256).is_err());
        assert!(PatchConfig::new(0.7, 77, 77, 256).is_ok());
    }

    #[test]
    fn side_arithmetic_and_offsets() {
        let cfg = PatchConfig::new(0.7, 0, 0, 256).unwrap();
        assert_eq!(cfg.side(), 179);
        assert_eq!(admissible_offset_max(0.7, 256), 77);
    }

    #[test]
    fn sampled_configs_are_admissible_and_rho_mean_matches() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let d = 64;
        let n = 10_000;
        let mut rho_sum = 0.0;
        for _ in 0..n {
            let cfg = sample_patch_config(&mut rng, d);
            assert!(PatchConfig::new(cfg.rho, cfg.j1, cfg.j2, cfg.d).is_ok());
            rho_sum += cfg.rho;
        }
        let mean = rho_sum / n as f64;
        assert!(
            (mean - 0.85).abs() < 0.02,
            "empirical rho mean {mean} out of range"
        );
    }

    #[test]
    fn identity_config_is_exact() {
        let mut img = Array3::<f32>::zeros((1, 8, 8));
        for (i, v) in img.iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin();
        }
        let out = apply_patch(&PatchConfig::identity(8), &img);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let img = Array3::<f64>::from_elem((2, 32, 32), 0.42);
        let cfg = PatchConfig::new(0.73, 3, 5, 32).unwrap();
        let out = apply_patch(&cfg, &img);
        for v in out.iter() {
            assert!((v - 0.42).abs() < 1e-5);
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        // <P(x), u> == <x, P^T(u)>
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = 16;
        for _ in 0..5 {
            let cfg = sample_patch_config(&mut rng, d);
            let x = Array3::<f64>::from_shape_fn((1, d, d), |_| rng.random_range(-1.0..1.0));
            let u = Array3::<f64>::from_shape_fn((1, d, d), |_| rng.random_range(-1.0..1.0));
            let lhs = (&apply_patch(&cfg, &x) * &u).sum();
            let rhs = (&x * &apply_patch_vjp(&cfg, &u)).sum();
            assert!((lhs - rhs).abs() < 1e-10, "cfg {cfg:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn batch_matches_single() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let d = 32;
        let b = 4;
        let batch = Array4::<f32>::from_shape_fn((b, 1, d, d), |_| rng.random_range(-1.0..1.0f32));
        let cfgs: Vec<_> = (0..b).map(|_| sample_patch_config(&mut rng, d)).collect();
        let out = apply_patch_batch(&cfgs, &batch);
        for i in 0..b {
            let single = apply_patch(&cfgs[i], &batch.index_axis(Axis(0), i).to_owned());
            let got = out.index_axis(Axis(0), i);
            for (a, b) in got.iter().zip(single.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn range_stability_on_random_batches() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let d = 32;
        for _ in 0..20 {
            let cfg = sample_patch_config(&mut rng, d);
            let img = Array3::<f32>::from_shape_fn((1, d, d), |_| rng.random_range(-1.0..=1.0f32));
            let out = apply_patch(&cfg, &img);
            for v in out.iter() {
                assert!(v.abs() <= 1.25, "overshoot beyond bicubic bound: {v}");
            }
        }
    }

    #[test]
    fn determinism_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = 32;
        let cfg = sample_patch_config(&mut rng, d);
        let img = Array3::<f32>::from_shape_fn((1, d, d), |_| rng.random_range(-1.0..1.0f32));
        let a = apply_patch(&cfg, &img);
        let b = apply_patch(&cfg, &img);
        assert_eq!(a, b);
    }

    #[test]
    #[should_panic(expected = "one patch config per batch element")]
    fn batch_length_mismatch_panics() {
        let batch = Array4::<f32>::zeros((3, 1, 32, 32));
        let cfgs = vec![PatchConfig::identity(32); 2];
        let _ = apply_patch_batch(&cfgs, &batch);
    }
}
