//! Empirical risks for the critic and the generator.
//!
//! The critic risk combines the Wasserstein terms on full images and on
//! resampled patches with a gradient penalty on random interpolates. The
//! generator risk combines the adversarial terms with a patch-invariance
//! loss, either plain L1 (`PI`) or attenuated by the predicted Laplace scale
//! map (`UAPI`).
//!
//! Every `_value` function is a pure function of (parameters, batch, draws);
//! the `_backward` variants additionally accumulate parameter gradients into
//! the models and return bit-identical loss values.

use ndarray::{Array1, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{CriticModel, GeneratorModel};
use crate::nn::Scalar;
use crate::patch_ops::{apply_patch, apply_patch_batch, apply_patch_batch_vjp, PatchConfig};

/// Which patch-invariance loss the generator trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchMode {
    /// Plain L1 patch invariance.
    PI,
    /// Uncertainty-attenuated patch invariance (Laplace scale map).
    UAPI,
}

impl std::fmt::Display for PatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatchMode::PI => write!(f, "PI"),
            PatchMode::UAPI => write!(f, "UAPI"),
        }
    }
}

/// Per-step loss components. `total` always equals the documented weighted
/// sum of the parts.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub adversarial_full: f64,
    pub adversarial_patch: f64,
    pub patch_term: f64,
    pub penalty_term: f64,
}

/// Knobs of the critic risk.
#[derive(Debug, Clone, Copy)]
pub struct CriticRiskOptions {
    /// Include the Wasserstein terms on resampled patches.
    pub patch_terms: bool,
    /// Also penalize interpolates of the patch pairs (off by default: the
    /// penalty is defined on full-size interpolates).
    pub penalty_on_patches: bool,
}

impl Default for CriticRiskOptions {
    fn default() -> Self {
        CriticRiskOptions {
            patch_terms: true,
            penalty_on_patches: false,
        }
    }
}

/// Knobs of the generator risk.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorRiskOptions {
    /// Include the adversarial term on the resampled patch of the output.
    pub patch_adversarial: bool,
}

impl Default for GeneratorRiskOptions {
    fn default() -> Self {
        GeneratorRiskOptions {
            patch_adversarial: true,
        }
    }
}

fn check_batch(wanted: usize, got: usize, what: &'static str) -> Result<()> {
    if wanted != got {
        return Err(Error::BatchMismatch {
            what,
            got,
            expected: wanted,
        });
    }
    Ok(())
}

fn mean_f64<S: Scalar>(v: &Array1<S>) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

/// Per-sample Euclidean norms of a gradient batch.
fn sample_norms<S: Scalar>(g: &Array4<S>) -> Vec<f64> {
    (0..g.dim().0)
        .map(|n| {
            g.index_axis(Axis(0), n)
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn interpolates<S: Scalar>(gx: &Array4<S>, y: &Array4<S>, eps: &[f64]) -> Array4<S> {
    let mut out = Array4::zeros(y.raw_dim());
    for n in 0..y.dim().0 {
        let e = S::from_f64(eps[n]);
        let one_minus = S::one() - e;
        let gxn = gx.index_axis(Axis(0), n);
        let yn = y.index_axis(Axis(0), n);
        let mut on = out.index_axis_mut(Axis(0), n);
        on.assign(&gxn.mapv(|v| v * e));
        on.zip_mut_with(&yn, |o, &v| *o = *o + one_minus * v);
    }
    out
}

/// Penalty values `((|grad| - 1)_+)^2` per sample and the cotangent
/// coefficients `2 (|grad| - 1)_+ / |grad|` used by the tangent pass.
fn penalty_terms(norms: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut vals = Vec::with_capacity(norms.len());
    let mut coeffs = Vec::with_capacity(norms.len());
    for &n in norms {
        let excess = (n - 1.0).max(0.0);
        vals.push(excess * excess);
        if excess > 0.0 && n > 0.0 {
            coeffs.push(2.0 * excess / n);
        } else {
            coeffs.push(0.0);
        }
    }
    (vals, coeffs)
}

/// Gradient-penalty value on a batch of interpolates; no parameter grads.
fn penalty_value<S: Scalar, C: CriticModel<S>>(critic: &C, ytilde: &Array4<S>) -> Vec<f64> {
    let (_, cache) = critic.forward_cached(ytilde);
    let ones = Array1::from_elem(ytilde.dim().0, S::one());
    let gin = critic.backward_input(&cache, &ones);
    let norms = sample_norms(&gin);
    penalty_terms(&norms).0
}

/// Gradient-penalty with parameter gradients: reverse pass for the input
/// gradient, tangent pass in that direction, reverse pass over the tangent.
fn penalty_backward<S: Scalar, C: CriticModel<S>>(
    critic: &mut C,
    ytilde: &Array4<S>,
    weight_per_sample: f64,
) -> Vec<f64> {
    let (_, cache) = critic.forward_cached(ytilde);
    let ones = Array1::from_elem(ytilde.dim().0, S::one());
    let gin = critic.backward_input(&cache, &ones);
    let norms = sample_norms(&gin);
    let (vals, coeffs) = penalty_terms(&norms);
    if coeffs.iter().any(|&c| c != 0.0) {
        let (_phi, tcache) = critic.tangent_forward(&cache, &gin);
        let seed = Array1::from_iter(coeffs.iter().map(|&c| S::from_f64(c * weight_per_sample)));
        critic.tangent_backward_params(&cache, &tcache, &seed);
    }
    vals
}

struct CriticBatches<S> {
    gx: Array4<S>,
    pgx: Option<Array4<S>>,
    py: Option<Array4<S>>,
    ytilde: Array4<S>,
}

fn critic_batches<S: Scalar, G: GeneratorModel<S>>(
    gen: &G,
    y: &Array4<S>,
    x: &Array4<S>,
    cfgs: &[PatchConfig],
    eps: &[f64],
    opts: &CriticRiskOptions,
) -> CriticBatches<S> {
    let gx = gen.forward_image(x);
    let (pgx, py) = if opts.patch_terms {
        (
            Some(apply_patch_batch(cfgs, &gx)),
            Some(apply_patch_batch(cfgs, y)),
        )
    } else {
        (None, None)
    };
    let ytilde = interpolates(&gx, y, eps);
    CriticBatches { gx, pgx, py, ytilde }
}

fn validate_critic_args<S: Scalar>(
    y: &Array4<S>,
    x: &Array4<S>,
    cfgs: &[PatchConfig],
    eps: &[f64],
    p: f64,
) -> Result<usize> {
    let b = y.dim().0;
    check_batch(b, x.dim().0, "x_batch")?;
    check_batch(b, cfgs.len(), "patch configs")?;
    check_batch(b, eps.len(), "epsilon draws")?;
    if p < 0.0 {
        return Err(Error::NegativeWeight {
            what: "gradient penalty",
            value: p,
        });
    }
    Ok(b)
}

/// Critic empirical risk (value only).
pub fn critic_risk_value<S, G, C>(
    critic: &C,
    gen: &G,
    y: &Array4<S>,
    x: &Array4<S>,
    p: f64,
    cfgs: &[PatchConfig],
    eps: &[f64],
    opts: &CriticRiskOptions,
) -> Result<LossBreakdown>
where
    S: Scalar,
    G: GeneratorModel<S>,
    C: CriticModel<S>,
{
    validate_critic_args(y, x, cfgs, eps, p)?;
    let batches = critic_batches(gen, y, x, cfgs, eps, opts);
    let adversarial_full = mean_f64(&critic.forward(&batches.gx)) - mean_f64(&critic.forward(y));
    let adversarial_patch = match (&batches.pgx, &batches.py) {
        (Some(pgx), Some(py)) => mean_f64(&critic.forward(pgx)) - mean_f64(&critic.forward(py)),
        _ => 0.0,
    };
    let mut pen_vals = penalty_value(critic, &batches.ytilde);
    if opts.penalty_on_patches {
        if let (Some(pgx), Some(py)) = (&batches.pgx, &batches.py) {
            let pt = interpolates(pgx, py, eps);
            pen_vals.extend(penalty_value(critic, &pt));
        }
    }
    let penalty_term = p * pen_vals.iter().sum::<f64>() / pen_vals.len() as f64;
    Ok(LossBreakdown {
        total: adversarial_full + adversarial_patch + penalty_term,
        adversarial_full,
        adversarial_patch,
        patch_term: 0.0,
        penalty_term,
    })
}

/// Critic empirical risk with parameter-gradient accumulation into `critic`.
/// The generator only supplies detached samples: its parameters receive no
/// gradient from this risk.
pub fn critic_risk_backward<S, G, C>(
    critic: &mut C,
    gen: &G,
    y: &Array4<S>,
    x: &Array4<S>,
    p: f64,
    cfgs: &[PatchConfig],
    eps: &[f64],
    opts: &CriticRiskOptions,
) -> Result<LossBreakdown>
where
    S: Scalar,
    G: GeneratorModel<S>,
    C: CriticModel<S>,
{
    let b = validate_critic_args(y, x, cfgs, eps, p)?;
    let batches = critic_batches(gen, y, x, cfgs, eps, opts);
    let inv_b = 1.0 / b as f64;

    let adv = |critic: &mut C, batch: &Array4<S>, sign: f64| -> f64 {
        let (vals, cache) = critic.forward_cached(batch);
        let seed = Array1::from_elem(b, S::from_f64(sign * inv_b));
        critic.backward_params(&cache, &seed);
        mean_f64(&vals)
    };

    let v_gx = adv(critic, &batches.gx, 1.0);
    let v_y = adv(critic, y, -1.0);
    let adversarial_full = v_gx - v_y;

    let adversarial_patch = match (&batches.pgx, &batches.py) {
        (Some(pgx), Some(py)) => {
            let vp = adv(critic, pgx, 1.0);
            let vy = adv(critic, py, -1.0);
            vp - vy
        }
        _ => 0.0,
    };

    let n_pen_batches = if opts.penalty_on_patches && opts.patch_terms {
        2
    } else {
        1
    };
    let weight = p * inv_b / n_pen_batches as f64;
    let mut pen_vals = penalty_backward(critic, &batches.ytilde, weight);
    if opts.penalty_on_patches {
        if let (Some(pgx), Some(py)) = (&batches.pgx, &batches.py) {
            let pt = interpolates(pgx, py, eps);
            pen_vals.extend(penalty_backward(critic, &pt, weight));
        }
    }
    let penalty_term = p * pen_vals.iter().sum::<f64>() / pen_vals.len() as f64;

    Ok(LossBreakdown {
        total: adversarial_full + adversarial_patch + penalty_term,
        adversarial_full,
        adversarial_patch,
        patch_term: 0.0,
        penalty_term,
    })
}

/// Mean absolute difference over all entries; the reduction behind the plain
/// patch loss.
pub fn mean_abs_residual<S: Scalar>(a: &Array3<S>, b: &Array3<S>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "residual operands must share a shape");
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&av, &bv)| (av.as_f64() - bv.as_f64()).abs())
        .sum::<f64>()
        / n
}

/// The uncertainty-attenuated objective on explicit fields:
/// `mean(|a - b| / sigma + ln(2 sigma))`.
pub fn uapi_objective<S: Scalar>(a: &Array3<S>, b: &Array3<S>, sigma: &Array3<S>) -> Result<f64> {
    assert_eq!(a.dim(), b.dim());
    assert_eq!(a.dim(), sigma.dim());
    let n = a.len() as f64;
    let mut acc = 0.0;
    for ((&av, &bv), &sv) in a.iter().zip(b.iter()).zip(sigma.iter()) {
        let s = sv.as_f64();
        if s <= 0.0 {
            return Err(Error::NonpositiveScale);
        }
        acc += (av.as_f64() - bv.as_f64()).abs() / s + (2.0 * s).ln();
    }
    Ok(acc / n)
}

/// Plain patch-invariance loss for a single sample:
/// `mean |G(P(x)) - P(G(x))|` over all output entries.
pub fn patch_loss_plain<S, G>(gen: &G, x: &Array3<S>, cfg: &PatchConfig) -> f64
where
    S: Scalar,
    G: GeneratorModel<S>,
{
    let xb = x.clone().insert_axis(Axis(0));
    let gx = gen.forward(&xb).image;
    let pgx = apply_patch(cfg, &gx.index_axis(Axis(0), 0).to_owned());
    let xp = apply_patch(cfg, x).insert_axis(Axis(0));
    let gpx = gen.forward(&xp).image;
    mean_abs_residual(&gpx.index_axis(Axis(0), 0).to_owned(), &pgx)
}

/// Uncertainty-attenuated patch loss for a single sample. The scale map is
/// taken from the patch-input forward pass.
pub fn patch_loss_uncertainty<S, G>(gen: &G, x: &Array3<S>, cfg: &PatchConfig) -> Result<f64>
where
    S: Scalar,
    G: GeneratorModel<S>,
{
    let xb = x.clone().insert_axis(Axis(0));
    let gx = gen.forward(&xb).image;
    let pgx = apply_patch(cfg, &gx.index_axis(Axis(0), 0).to_owned());
    let xp = apply_patch(cfg, x).insert_axis(Axis(0));
    let out = gen.forward(&xp);
    uapi_objective(
        &out.image.index_axis(Axis(0), 0).to_owned(),
        &pgx,
        &out.scale.index_axis(Axis(0), 0).to_owned(),
    )
}

/// Generator adversarial risk: `-mean[f(G(x)) + f(P(G(x)))]`.
pub fn generator_adversarial_value<S, G, C>(
    gen: &G,
    critic: &C,
    x: &Array4<S>,
    cfgs: &[PatchConfig],
) -> Result<f64>
where
    S: Scalar,
    G: GeneratorModel<S>,
    C: CriticModel<S>,
{
    let risk = generator_risk_value(
        gen,
        critic,
        x,
        cfgs,
        0.0,
        PatchMode::PI,
        &GeneratorRiskOptions::default(),
    )?;
    Ok(risk.total)
}

fn validate_generator_args<S: Scalar>(
    x: &Array4<S>,
    cfgs: &[PatchConfig],
    lambda: f64,
) -> Result<usize> {
    let b = x.dim().0;
    check_batch(b, cfgs.len(), "patch configs")?;
    if lambda < 0.0 {
        return Err(Error::NegativeWeight {
            what: "patch weight",
            value: lambda,
        });
    }
    Ok(b)
}

/// Generator risk (value only).
pub fn generator_risk_value<S, G, C>(
    gen: &G,
    critic: &C,
    x: &Array4<S>,
    cfgs: &[PatchConfig],
    lambda: f64,
    mode: PatchMode,
    opts: &GeneratorRiskOptions,
) -> Result<LossBreakdown>
where
    S: Scalar,
    G: GeneratorModel<S>,
    C: CriticModel<S>,
{
    let b = validate_generator_args(x, cfgs, lambda)?;
    let out_full = gen.forward(x);
    let u = apply_patch_batch(cfgs, &out_full.image);
    let adversarial_full = -mean_f64(&critic.forward(&out_full.image));
    let adversarial_patch = if opts.patch_adversarial {
        -mean_f64(&critic.forward(&u))
    } else {
        0.0
    };
    let xp = apply_patch_batch(cfgs, x);
    let out_patch = gen.forward(&xp);
    let mut patch_term = 0.0;
    for n in 0..b {
        let a = out_patch.image.index_axis(Axis(0), n).to_owned();
        let bimg = u.index_axis(Axis(0), n).to_owned();
        patch_term += match mode {
            PatchMode::PI => mean_abs_residual(&a, &bimg),
            PatchMode::UAPI => {
                let sigma = out_patch.scale.index_axis(Axis(0), n).to_owned();
                uapi_objective(&a, &bimg, &sigma)?
            }
        };
    }
    patch_term /= b as f64;
    Ok(LossBreakdown {
        total: adversarial_full + adversarial_patch + lambda * patch_term,
        adversarial_full,
        adversarial_patch,
        patch_term,
        penalty_term: 0.0,
    })
}

/// Generator risk with parameter-gradient accumulation into `gen`. The
/// critic is only consulted for values and input gradients: its parameters
/// receive no update from this risk.
pub fn generator_risk_backward<S, G, C>(
    gen: &mut G,
    critic: &C,
    x: &Array4<S>,
    cfgs: &[PatchConfig],
    lambda: f64,
    mode: PatchMode,
    opts: &GeneratorRiskOptions,
) -> Result<LossBreakdown>
where
    S: Scalar,
    G: GeneratorModel<S>,
    C: CriticModel<S>,
{
    let b = validate_generator_args(x, cfgs, lambda)?;
    let inv_b = 1.0 / b as f64;
    let (out_full, cache_full) = gen.forward_cached(x);
    let u = apply_patch_batch(cfgs, &out_full.image);
    let xp = apply_patch_batch(cfgs, x);
    let (out_patch, cache_patch) = gen.forward_cached(&xp);

    // adversarial terms and their input gradients
    let (vals_full, ccache_full) = critic.forward_cached(&out_full.image);
    let seed = Array1::from_elem(b, S::from_f64(-inv_b));
    let mut d_img_full = critic.backward_input(&ccache_full, &seed);
    let adversarial_full = -mean_f64(&vals_full);
    let adversarial_patch = if opts.patch_adversarial {
        let (vals_patch, ccache_patch) = critic.forward_cached(&u);
        let d_u_adv = critic.backward_input(&ccache_patch, &seed);
        d_img_full = &d_img_full + &apply_patch_batch_vjp(cfgs, &d_u_adv);
        -mean_f64(&vals_patch)
    } else {
        0.0
    };

    // patch-invariance term
    let n_per = out_patch.image.len() / b;
    let w_pix = lambda * inv_b / n_per as f64;
    let mut d_b_img = Array4::<S>::zeros(out_patch.image.raw_dim());
    let mut d_u_patch = Array4::<S>::zeros(u.raw_dim());
    let mut d_sigma = Array4::<S>::zeros(out_patch.scale.raw_dim());
    let mut patch_term = 0.0;
    {
        let a = &out_patch.image;
        for n in 0..b {
            let an = a.index_axis(Axis(0), n);
            let un = u.index_axis(Axis(0), n);
            let mut dbn = d_b_img.index_axis_mut(Axis(0), n);
            let mut dun = d_u_patch.index_axis_mut(Axis(0), n);
            match mode {
                PatchMode::PI => {
                    let mut acc = 0.0;
                    ndarray::Zip::from(&an).and(&un).and(&mut dbn).and(&mut dun).for_each(
                        |&av, &uv, db, du| {
                            let r = av.as_f64() - uv.as_f64();
                            acc += r.abs();
                            let s = if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *db = S::from_f64(s * w_pix);
                            *du = S::from_f64(-s * w_pix);
                        },
                    );
                    patch_term += acc / n_per as f64;
                }
                PatchMode::UAPI => {
                    let sn = out_patch.scale.index_axis(Axis(0), n);
                    let mut dsn = d_sigma.index_axis_mut(Axis(0), n);
                    let mut acc = 0.0;
                    let mut bad_scale = false;
                    ndarray::Zip::from(&an)
                        .and(&un)
                        .and(&sn)
                        .and(&mut dbn)
                        .and(&mut dun)
                        .and(&mut dsn)
                        .for_each(|&av, &uv, &sv, db, du, ds| {
                            let s = sv.as_f64();
                            if s <= 0.0 {
                                bad_scale = true;
                                return;
                            }
                            let r = av.as_f64() - uv.as_f64();
                            acc += r.abs() / s + (2.0 * s).ln();
                            let sgn = if r > 0.0 {
                                1.0
                            } else if r < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *db = S::from_f64(sgn / s * w_pix);
                            *du = S::from_f64(-sgn / s * w_pix);
                            *ds = S::from_f64((1.0 - r.abs() / s) / s * w_pix);
                        });
                    if bad_scale {
                        return Err(Error::NonpositiveScale);
                    }
                    patch_term += acc / n_per as f64;
                }
            }
        }
    }
    patch_term /= b as f64;

    d_img_full = &d_img_full + &apply_patch_batch_vjp(cfgs, &d_u_patch);
    gen.backward(&cache_patch, &d_b_img, &d_sigma);
    let zero_scale = Array4::<S>::zeros(out_full.scale.raw_dim());
    gen.backward(&cache_full, &d_img_full, &zero_scale);

    Ok(LossBreakdown {
        total: adversarial_full + adversarial_patch + lambda * patch_term,
        adversarial_full,
        adversarial_patch,
        patch_term,
        penalty_term: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ConvCritic, CriticSpec, GeneratorSpec, UNetGenerator};
    use crate::nn::ParamSet;
    use crate::patch_ops::sample_patch_config;
    use crate::testing::{ConstantCritic, IdentityGenerator, LinearCritic, SquareGenerator};
    use ndarray::{Array3, Array4};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_batch(rng: &mut ChaCha12Rng, b: usize, d: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, 1, d, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn critic_risk_vanishes_for_zero_critic_without_penalty() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let d = 16;
        let critic = ConstantCritic { value: 0.0f64 };
        let gen = IdentityGenerator::new(0.5);
        let y = rand_batch(&mut rng, 4, d);
        let x = rand_batch(&mut rng, 4, d);
        let cfgs: Vec<_> = (0..4).map(|_| sample_patch_config(&mut rng, d)).collect();
        let eps = vec![0.3; 4];
        let bd = critic_risk_value(
            &critic,
            &gen,
            &y,
            &x,
            0.0,
            &cfgs,
            &eps,
            &CriticRiskOptions::default(),
        )
        .unwrap();
        assert_eq!(bd.total, 0.0);
        assert_eq!(bd.penalty_term, 0.0);
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = 8;
        let critic = LinearCritic::<f64>::with_norm(1, d, d, 1.0);
        let gen = IdentityGenerator::new(0.5);
        let y = rand_batch(&mut rng, 2, d);
        let x = rand_batch(&mut rng, 2, d);
        let cfgs = vec![crate::patch_ops::PatchConfig::identity(d); 2];
        let eps = vec![0.25, 0.75];
        let bd = critic_risk_value(
            &critic,
            &gen,
            &y,
            &x,
            123.0,
            &cfgs,
            &eps,
            &CriticRiskOptions::default(),
        )
        .unwrap();
        assert!(bd.penalty_term.abs() < 1e-12);
    }

    #[test]
    fn linear_critic_norm_three_penalty_is_forty() {
        // p = 10, |w| = 3, single sample: 10 * (3 - 1)^2 = 40
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = 8;
        let critic = LinearCritic::<f64>::with_norm(1, d, d, 3.0);
        let gen = IdentityGenerator::new(0.5);
        let y = rand_batch(&mut rng, 1, d);
        let x = rand_batch(&mut rng, 1, d);
        let cfgs = vec![crate::patch_ops::PatchConfig::identity(d)];
        let eps = vec![0.5];
        let bd = critic_risk_value(
            &critic,
            &gen,
            &y,
            &x,
            10.0,
            &cfgs,
            &eps,
            &CriticRiskOptions::default(),
        )
        .unwrap();
        assert!((bd.penalty_term - 40.0).abs() < 1e-9, "{}", bd.penalty_term);
    }

    #[test]
    fn linear_critic_penalty_gradient_matches_analytic() {
        // d/dw of p ((|w| - 1)_+)^2 is 2 p (|w| - 1)_+ w / |w|
        let d = 8;
        for norm in [0.5, 1.7, 3.0] {
            let mut critic = LinearCritic::<f64>::with_norm(1, d, d, norm);
            let gen = IdentityGenerator::new(0.5);
            let mut rng = ChaCha12Rng::seed_from_u64(3);
            let y = rand_batch(&mut rng, 1, d);
            let x = rand_batch(&mut rng, 1, d);
            let cfgs = vec![crate::patch_ops::PatchConfig::identity(d)];
            let eps = vec![0.4];
            let p = 10.0;
            critic.zero_grads();
            // patch terms off so the only w-gradient besides the penalty is
            // the adversarial part, which we subtract analytically
            let opts = CriticRiskOptions {
                patch_terms: false,
                penalty_on_patches: false,
            };
            critic_risk_backward(&mut critic, &gen, &y, &x, p, &cfgs, &eps, &opts).unwrap();
            let grads = critic.read_grads();
            let w: Vec<f64> = critic.read_params();
            let gx = gen.forward(&x).image;
            // adversarial part of the gradient: (gx - y) / b
            let adv: Vec<f64> = gx
                .iter()
                .zip(y.iter())
                .map(|(&a, &b)| a - b)
                .collect();
            let wnorm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let coeff = if wnorm > 1.0 {
                2.0 * p * (wnorm - 1.0) / wnorm
            } else {
                0.0
            };
            for i in 0..w.len() {
                let expected = adv[i] + coeff * w[i];
                assert!(
                    (grads[i] - expected).abs() < 1e-9,
                    "norm={norm} i={i}: got {} want {expected}",
                    grads[i]
                );
            }
        }
    }

    #[test]
    fn constant_critic_generator_adversarial_is_minus_two_c() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let d = 16;
        let critic = ConstantCritic { value: 1.75f64 };
        let gen = IdentityGenerator::new(0.5);
        let x = rand_batch(&mut rng, 3, d);
        let cfgs: Vec<_> = (0..3).map(|_| sample_patch_config(&mut rng, d)).collect();
        let v = generator_adversarial_value(&gen, &critic, &x, &cfgs).unwrap();
        assert!((v - (-3.5)).abs() < 1e-12);
    }

    #[test]
    fn identity_cfgs_duplicate_the_full_term() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let d = 8;
        let critic = LinearCritic::<f64>::with_norm(1, d, d, 2.0);
        let gen = IdentityGenerator::new(0.5);
        let x = rand_batch(&mut rng, 4, d);
        let cfgs = vec![crate::patch_ops::PatchConfig::identity(d); 4];
        let v = generator_adversarial_value(&gen, &critic, &x, &cfgs).unwrap();
        let mean_f: f64 = critic.forward(&x).iter().sum::<f64>() / 4.0;
        assert!((v - (-2.0 * mean_f)).abs() < 1e-12);
    }

    #[test]
    fn linear_critic_generator_adversarial_matches_inner_products() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let d = 16;
        let critic = LinearCritic::<f64>::with_norm(1, d, d, 1.3);
        let gen = IdentityGenerator::new(0.5);
        let x = rand_batch(&mut rng, 2, d);
        let cfgs: Vec<_> = (0..2).map(|_| sample_patch_config(&mut rng, d)).collect();
        let v = generator_adversarial_value(&gen, &critic, &x, &cfgs).unwrap();
        // hand-computed: -(1/b) sum <w, x_n> + <w, P(x_n)>
        let w = critic.w.index_axis(ndarray::Axis(0), 0).to_owned();
        let mut expect = 0.0;
        for n in 0..2 {
            let xn = x.index_axis(ndarray::Axis(0), n).to_owned();
            let pxn = apply_patch(&cfgs[n], &xn);
            expect += (&w * &xn).sum() + (&w * &pxn).sum();
        }
        expect *= -0.5;
        assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
    }

    #[test]
    fn patch_loss_plain_zero_cases() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let d = 16;
        let gen = IdentityGenerator::<f64>::new(0.5);
        let x = Array3::from_shape_fn((1, d, d), |_| rng.random_range(-1.0..1.0));
        // identity generator commutes with any patch
        let cfg = sample_patch_config(&mut rng, d);
        assert!(patch_loss_plain(&gen, &x, &cfg).abs() < 1e-12);
        // identity patch makes both sides G(x) for any generator
        let gen2 = SquareGenerator::<f64> { scale: 1.0 };
        let cfg_id = crate::patch_ops::PatchConfig::identity(d);
        assert!(patch_loss_plain(&gen2, &x, &cfg_id).abs() < 1e-12);
    }

    #[test]
    fn mean_abs_residual_matches_scalar_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = Array3::<f64>::from_shape_fn((1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let b = Array3::<f64>::from_shape_fn((1, 8, 8), |_| rng.random_range(-1.0..1.0));
        let got = mean_abs_residual(&a, &b);
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..8 {
            for j in 0..8 {
                acc += (a[[0, i, j]] - b[[0, i, j]]).abs();
                n += 1;
            }
        }
        assert!((got - acc / n as f64).abs() < 1e-6);
    }

    #[test]
    fn uapi_closed_form_values() {
        // zero residual at sigma = 1/2: 0 + ln(1) = 0
        let a = Array3::<f64>::from_elem((1, 4, 4), 0.3);
        let s_half = Array3::<f64>::from_elem((1, 4, 4), 0.5);
        assert!(uapi_objective(&a, &a, &s_half).unwrap().abs() < 1e-12);
        // residual 0.5 at sigma = 1: 0.5 + ln 2
        let b = a.mapv(|v| v + 0.5);
        let s_one = Array3::<f64>::ones((1, 4, 4));
        let got = uapi_objective(&b, &a, &s_one).unwrap();
        assert!((got - (0.5 + 2.0f64.ln())).abs() < 1e-12);
        // nonpositive sigma is a hard failure
        let s_bad = Array3::<f64>::zeros((1, 4, 4));
        assert!(uapi_objective(&a, &a, &s_bad).is_err());
    }

    #[test]
    fn constant_sigma_reduces_to_plain_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..100 {
            let a = Array3::<f64>::from_shape_fn((1, 6, 6), |_| rng.random_range(-1.0..1.0));
            let b = Array3::<f64>::from_shape_fn((1, 6, 6), |_| rng.random_range(-1.0..1.0));
            let s: f64 = rng.random_range(0.05..3.0);
            let sigma = Array3::from_elem((1, 6, 6), s);
            let uapi = uapi_objective(&a, &b, &sigma).unwrap();
            let plain = mean_abs_residual(&a, &b);
            let reduced = plain / s + (2.0 * s).ln();
            assert!((uapi - reduced).abs() < 1e-6, "{uapi} vs {reduced}");
        }
    }

    #[test]
    fn per_pixel_scale_optimum_is_the_residual() {
        // golden-section search over s -> r/s + ln(2s)
        let golden = |f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64| -> f64 {
            let phi = (5.0f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let m1 = hi - phi * (hi - lo);
                let m2 = lo + phi * (hi - lo);
                if f(m1) < f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            0.5 * (lo + hi)
        };
        for r in [0.1, 0.5, 2.0] {
            let f = move |s: f64| r / s + (2.0 * s).ln();
            let s_star = golden(&f, 1e-4, 10.0);
            assert!((s_star - r).abs() < 1e-4, "r={r}: argmin {s_star}");
        }
    }

    #[test]
    fn generator_risk_lambda_zero_equals_adversarial() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let d = 16;
        let critic = LinearCritic::<f64>::with_norm(1, d, d, 1.1);
        let gen = SquareGenerator::<f64> { scale: 0.5 };
        let x = rand_batch(&mut rng, 3, d);
        let cfgs: Vec<_> = (0..3).map(|_| sample_patch_config(&mut rng, d)).collect();
        let bd = generator_risk_value(
            &gen,
            &critic,
            &x,
            &cfgs,
            0.0,
            PatchMode::PI,
            &GeneratorRiskOptions::default(),
        )
        .unwrap();
        let adv = generator_adversarial_value(&gen, &critic, &x, &cfgs).unwrap();
        assert!((bd.total - adv).abs() < 1e-12);
    }

    #[test]
    fn uapi_risk_at_constant_half_sigma_doubles_patch_term() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let d = 16;
        let critic = ConstantCritic { value: 0.0f64 };
        let gen = SquareGenerator::<f64> { scale: 0.5 };
        let x = rand_batch(&mut rng, 2, d);
        let cfgs: Vec<_> = (0..2).map(|_| sample_patch_config(&mut rng, d)).collect();
        let lambda = 7.0;
        let pi = generator_risk_value(
            &gen,
            &critic,
            &x,
            &cfgs,
            lambda,
            PatchMode::PI,
            &GeneratorRiskOptions::default(),
        )
        .unwrap();
        let uapi = generator_risk_value(
            &gen,
            &critic,
            &x,
            &cfgs,
            lambda,
            PatchMode::UAPI,
            &GeneratorRiskOptions::default(),
        )
        .unwrap();
        // sigma = 1/2 everywhere: |r|/sigma = 2|r|, log(2 sigma) = 0
        assert!(
            (uapi.patch_term - 2.0 * pi.patch_term).abs() < 1e-9,
            "{} vs {}",
            uapi.patch_term,
            2.0 * pi.patch_term
        );
        assert!((uapi.total - (lambda * uapi.patch_term)).abs() < 1e-9);
    }

    #[test]
    fn breakdown_total_is_the_weighted_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let d = 32;
        let mut grng = ChaCha12Rng::seed_from_u64(13);
        let gen =
            UNetGenerator::<f64>::new(GeneratorSpec::new(d, 1, 1, 3).unwrap(), &mut grng).unwrap();
        let critic =
            ConvCritic::<f64>::new(CriticSpec::new(d, 1, 3).unwrap(), &mut grng).unwrap();
        let y = rand_batch(&mut rng, 2, d);
        let x = rand_batch(&mut rng, 2, d);
        let cfgs: Vec<_> = (0..2).map(|_| sample_patch_config(&mut rng, d)).collect();
        let eps = vec![0.2, 0.9];
        let bd = critic_risk_value(
            &critic,
            &gen,
            &y,
            &x,
            10.0,
            &cfgs,
            &eps,
            &CriticRiskOptions::default(),
        )
        .unwrap();
        let sum = bd.adversarial_full + bd.adversarial_patch + bd.patch_term + bd.penalty_term;
        assert!((bd.total - sum).abs() < 1e-6);
        let lambda = 4.0;
        let gd = generator_risk_value(
            &gen,
            &critic,
            &x,
            &cfgs,
            lambda,
            PatchMode::UAPI,
            &GeneratorRiskOptions::default(),
        )
        .unwrap();
        let gsum = gd.adversarial_full + gd.adversarial_patch + lambda * gd.patch_term;
        assert!((gd.total - gsum).abs() < 1e-6);
    }

    #[test]
    fn batch_mismatch_and_negative_weights_are_errors() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let d = 16;
        let critic = ConstantCritic { value: 0.0f64 };
        let gen = IdentityGenerator::new(0.5);
        let y = rand_batch(&mut rng, 2, d);
        let x = rand_batch(&mut rng, 3, d);
        let cfgs = vec![crate::patch_ops::PatchConfig::identity(d); 2];
        let eps = vec![0.5; 2];
        assert!(matches!(
            critic_risk_value(&critic, &gen, &y, &x, 1.0, &cfgs, &eps, &Default::default()),
            Err(Error::BatchMismatch { .. })
        ));
        let x2 = rand_batch(&mut rng, 2, d);
        assert!(matches!(
            critic_risk_value(&critic, &gen, &y, &x2, -1.0, &cfgs, &eps, &Default::default()),
            Err(Error::NegativeWeight { .. })
        ));
        assert!(matches!(
            generator_risk_value(
                &gen,
                &critic,
                &x2,
                &cfgs,
                -2.0,
                PatchMode::PI,
                &Default::default()
            ),
            Err(Error::NegativeWeight { .. })
        ));
    }

    /// Central-difference gradient checks of both risks on thin d=32
    /// networks, along random parameter directions.
    #[test]
    fn risk_gradients_match_finite_differences() {
        let d = 32;
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mut gen =
            UNetGenerator::<f64>::new(GeneratorSpec::new(d, 1, 1, 2).unwrap(), &mut rng).unwrap();
        let mut critic =
            ConvCritic::<f64>::new(CriticSpec::new(d, 1, 2).unwrap(), &mut rng).unwrap();
        let y = rand_batch(&mut rng, 2, d);
        let x = rand_batch(&mut rng, 2, d);
        let cfgs: Vec<_> = (0..2).map(|_| sample_patch_config(&mut rng, d)).collect();
        let eps = vec![0.3, 0.8];
        let p = 10.0;

        // critic risk wrt critic params
        critic.zero_grads();
        let bd = critic_risk_backward(
            &mut critic,
            &gen,
            &y,
            &x,
            p,
            &cfgs,
            &eps,
            &CriticRiskOptions::default(),
        )
        .unwrap();
        let grads = critic.read_grads();
        let theta0 = critic.read_params();
        let h = 1e-5;
        for k in 0..4 {
            let mut dir = vec![0.0; theta0.len()];
            for (i, v) in dir.iter_mut().enumerate() {
                *v = (((i + k * 31) as f64) * 0.37).sin();
            }
            let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in dir.iter_mut() {
                *v /= nrm;
            }
            let eval = |c: &mut ConvCritic<f64>, t: &[f64]| -> f64 {
                c.write_params(t);
                critic_risk_value(c, &gen, &y, &x, p, &cfgs, &eps, &Default::default())
                    .unwrap()
                    .total
            };
            let tp: Vec<f64> = theta0.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let tm: Vec<f64> = theta0.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let fd = (eval(&mut critic, &tp) - eval(&mut critic, &tm)) / (2.0 * h);
            let an: f64 = grads.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 2e-2,
                "critic dir {k}: fd={fd} an={an} (risk {bd:?})"
            );
        }
        critic.write_params(&theta0);

        // generator risk wrt generator params, both modes
        for mode in [PatchMode::PI, PatchMode::UAPI] {
            gen.zero_grads();
            generator_risk_backward(
                &mut gen,
                &critic,
                &x,
                &cfgs,
                3.0,
                mode,
                &GeneratorRiskOptions::default(),
            )
            .unwrap();
            let grads = gen.read_grads();
            let theta0 = gen.read_params();
            for k in 0..3 {
                let mut dir = vec![0.0; theta0.len()];
                for (i, v) in dir.iter_mut().enumerate() {
                    *v = (((i * 7 + k * 13) as f64) * 0.23).cos();
                }
                let nrm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                for v in dir.iter_mut() {
                    *v /= nrm;
                }
                let eval = |g: &mut UNetGenerator<f64>, t: &[f64]| -> f64 {
                    g.write_params(t);
                    generator_risk_value(g, &critic, &x, &cfgs, 3.0, mode, &Default::default())
                        .unwrap()
                        .total
                };
                let tp: Vec<f64> = theta0.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
                let tm: Vec<f64> = theta0.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
                let fd = (eval(&mut gen, &tp) - eval(&mut gen, &tm)) / (2.0 * h);
                let an: f64 = grads.iter().zip(&dir).map(|(a, b)| a * b).sum();
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 2e-2,
                    "gen {mode} dir {k}: fd={fd} an={an}"
                );
            }
            gen.write_params(&theta0);
        }
    }
}
