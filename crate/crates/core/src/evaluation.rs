//! Evaluation protocol: SSIM/PSNR on original image scale, perturbation
//! scenarios (Gaussian noise, impulse replacement), and the correlation
//! between per-image mean absolute residuals and mean predicted scale.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{denormalize_chw, normalize, DomainImage, ValueRange};
use crate::error::{Error, Result};
use crate::networks::{GeneratorModel, UNetGenerator};

/// Anything that maps one model-range input image (channel-major) to a
/// transferred image, optionally with a scale map.
pub trait ImageTransfer {
    fn transfer_chw(&self, x_model: &Array3<f32>) -> (Array3<f32>, Option<Array3<f32>>);
}

impl ImageTransfer for UNetGenerator<f32> {
    fn transfer_chw(&self, x_model: &Array3<f32>) -> (Array3<f32>, Option<Array3<f32>>) {
        let batch = x_model.clone().insert_axis(Axis(0));
        let out = self.forward(&batch);
        (
            out.image.index_axis(Axis(0), 0).to_owned(),
            Some(out.scale.index_axis(Axis(0), 0).to_owned()),
        )
    }
}

/// The identity map, used as the no-model baseline.
pub struct IdentityTransfer;

impl ImageTransfer for IdentityTransfer {
    fn transfer_chw(&self, x_model: &Array3<f32>) -> (Array3<f32>, Option<Array3<f32>>) {
        (x_model.clone(), None)
    }
}

/// Perturbation kind applied to raw-range inputs before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationKind {
    /// Additive Gaussian noise, std = level * 255, clamped to range.
    GaussianNoise,
    /// Replace exactly `floor(level * pixels)` entries by uniform draws.
    ImpulseReplacement,
}

/// A named evaluation condition, e.g. GN5 or IP2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: PerturbationKind,
    /// Fraction of the value range (GN) or of the pixel count (IP).
    pub level: f64,
    pub seed: u64,
}

impl Scenario {
    pub fn clean(seed: u64) -> Self {
        Scenario {
            kind: PerturbationKind::GaussianNoise,
            level: 0.0,
            seed,
        }
    }

    pub fn name(&self) -> String {
        let pct = (self.level * 100.0).round() as u64;
        match self.kind {
            PerturbationKind::GaussianNoise => format!("GN{pct}"),
            PerturbationKind::ImpulseReplacement => format!("IP{pct}"),
        }
    }

    /// The stock scenario battery: GN0, GN5, GN10, GN20, IP2, IP5, IP10.
    pub fn standard_set(seed: u64) -> Vec<Scenario> {
        let gn = [0.0, 0.05, 0.10, 0.20].into_iter().map(|level| Scenario {
            kind: PerturbationKind::GaussianNoise,
            level,
            seed,
        });
        let ip = [0.02, 0.05, 0.10].into_iter().map(|level| Scenario {
            kind: PerturbationKind::ImpulseReplacement,
            level,
            seed,
        });
        gn.chain(ip).collect()
    }

    pub fn parse_list(text: &str, seed: u64) -> Result<Vec<Scenario>> {
        text.split(',')
            .map(|s| {
                let mut sc: Scenario = s.trim().parse()?;
                sc.seed = seed;
                Ok(sc)
            })
            .collect()
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = || Error::UnknownScenario { name: s.into() };
        let (kind, digits) = if let Some(rest) = s.strip_prefix("GN") {
            (PerturbationKind::GaussianNoise, rest)
        } else if let Some(rest) = s.strip_prefix("IP") {
            (PerturbationKind::ImpulseReplacement, rest)
        } else {
            return Err(err());
        };
        let pct: f64 = digits.parse().map_err(|_| err())?;
        if !(0.0..=100.0).contains(&pct) {
            return Err(err());
        }
        Ok(Scenario {
            kind,
            level: pct / 100.0,
            seed: 0,
        })
    }
}

/// Apply a perturbation scenario to a raw-range image. Deterministic given
/// the RNG state; the image is otherwise untouched.
pub fn perturb(img: &DomainImage, scenario: &Scenario, rng: &mut ChaCha12Rng) -> Result<DomainImage> {
    if img.value_range != ValueRange::Raw0255 {
        return Err(Error::ValueRange {
            expected: "raw_0_255",
            actual: "model_minus1_1",
        });
    }
    let mut pixels = img.pixels.clone();
    match scenario.kind {
        PerturbationKind::GaussianNoise => {
            if scenario.level > 0.0 {
                let std = scenario.level * 255.0;
                for v in pixels.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = (*v + (z * std) as f32).clamp(0.0, 255.0);
                }
            }
        }
        PerturbationKind::ImpulseReplacement => {
            let n = pixels.len();
            let k = (scenario.level * n as f64).floor() as usize;
            // partial Fisher-Yates for k distinct positions
            let mut idx: Vec<u32> = (0..n as u32).collect();
            let flat = pixels.as_slice_mut().expect("contiguous pixels");
            for t in 0..k {
                let j = rng.random_range(t..n);
                idx.swap(t, j);
                flat[idx[t] as usize] = rng.random_range(0.0..=255.0f64) as f32;
            }
        }
    }
    DomainImage::new(
        pixels,
        ValueRange::Raw0255,
        img.domain_tag,
        img.source_id.clone(),
    )
}

// ---------------------------------------------------------------------------
// SSIM / PSNR
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut z = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        z += *v;
    }
    for v in w.iter_mut() {
        *v /= z;
    }
    w
}

/// Separable weighted local filtering, valid-mode.
fn filter_valid(img: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, wd) = img.dim();
    let k = SSIM_WINDOW;
    let oh = h - k + 1;
    let ow = wd - k + 1;
    let mut mid = Array2::<f64>::zeros((oh, wd));
    for i in 0..oh {
        for j in 0..wd {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * img[[i + t, j]];
            }
            mid[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &wt) in w.iter().enumerate() {
                acc += wt * mid[[i, j + t]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let w = gaussian_window();
    let mu_a = filter_valid(a, &w);
    let mu_b = filter_valid(b, &w);
    let aa = filter_valid(&(a * a), &w);
    let bb = filter_valid(&(b * b), &w);
    let ab = filter_valid(&(a * b), &w);
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let v = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        acc += v;
        count += 1;
    }
    acc / count as f64
}

fn check_pair_shapes(pred: &DomainImage, gt: &DomainImage) -> Result<()> {
    if pred.pixels.dim() != gt.pixels.dim() {
        return Err(Error::ShapeMismatch {
            what: "metric operands",
            got: format!("{:?}", pred.pixels.dim()),
            expected: format!("{:?}", gt.pixels.dim()),
        });
    }
    Ok(())
}

/// Structural similarity on original image scale: 11x11 Gaussian window
/// (std 1.5), stabilizers `(0.01*255)^2` and `(0.03*255)^2`, valid-mode
/// window positions, channels averaged.
pub fn ssim(pred: &DomainImage, gt: &DomainImage) -> Result<f64> {
    check_pair_shapes(pred, gt)?;
    let (h, w, c) = pred.pixels.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            what: "ssim window",
            got: format!("{h}x{w}"),
            expected: format!(">= {SSIM_WINDOW}x{SSIM_WINDOW}"),
        });
    }
    let mut acc = 0.0;
    for ci in 0..c {
        let a = pred.pixels.index_axis(Axis(2), ci).mapv(|v| v as f64);
        let b = gt.pixels.index_axis(Axis(2), ci).mapv(|v| v as f64);
        acc += ssim_plane(&a.to_owned(), &b.to_owned());
    }
    Ok(acc / c as f64)
}

/// Peak signal-to-noise ratio in dB on original image scale. Zero MSE is
/// reported as infinity; aggregation caps it at [`PSNR_CAP_DB`].
pub fn psnr(pred: &DomainImage, gt: &DomainImage) -> Result<f64> {
    check_pair_shapes(pred, gt)?;
    let mut mse = 0.0f64;
    for (&a, &b) in pred.pixels.iter().zip(gt.pixels.iter()) {
        let e = a as f64 - b as f64;
        mse += e * e;
    }
    mse /= pred.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub const PSNR_CAP_DB: f64 = 100.0;

fn cap_psnr(v: f64) -> f64 {
    if v.is_finite() {
        v.min(PSNR_CAP_DB)
    } else {
        PSNR_CAP_DB
    }
}

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    /// Mean of per-image mean scale values (uncertainty models only).
    pub mean_scale: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ScenarioRow>,
    pub sample_count: usize,
    pub config_echo: String,
}

impl EvalReport {
    /// Machine-readable table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,ssim_mean,ssim_std,psnr_mean,psnr_std\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.scenario, r.ssim_mean, r.ssim_std, r.psnr_mean, r.psnr_std
            );
        }
        out
    }

    /// Human-readable report.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluation over {} pairs", self.sample_count);
        if !self.config_echo.is_empty() {
            let _ = writeln!(out, "config: {}", self.config_echo);
        }
        let _ = writeln!(
            out,
            "{:<8} {:>12} {:>12} {:>12} {:>12}",
            "scenario", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<8} {:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                r.scenario, r.ssim_mean, r.ssim_std, r.psnr_mean, r.psnr_std
            );
        }
        out
    }
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn to_raw(img: &DomainImage) -> Result<DomainImage> {
    match img.value_range {
        ValueRange::Raw0255 => Ok(img.clone()),
        ValueRange::ModelMinus1To1 => crate::data_model::denormalize(img),
    }
}

/// Run the evaluation protocol: perturb inputs in raw range, normalize, run
/// the transfer, denormalize the image head, and score SSIM/PSNR against the
/// raw ground truth.
pub fn evaluate<T: ImageTransfer>(
    transfer: &T,
    eval_pairs: &[(DomainImage, DomainImage)],
    scenarios: &[Scenario],
    collect_scale: bool,
) -> Result<EvalReport> {
    if eval_pairs.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    let mut rows = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let mut rng = ChaCha12Rng::seed_from_u64(sc.seed);
        rng.set_stream(40);
        let mut ssims = Vec::with_capacity(eval_pairs.len());
        let mut psnrs = Vec::with_capacity(eval_pairs.len());
        let mut scales = Vec::new();
        for (x, gt) in eval_pairs {
            let x_raw = to_raw(x)?;
            let gt_raw = to_raw(gt)?;
            let perturbed = perturb(&x_raw, sc, &mut rng)?;
            let x_model = normalize(&perturbed)?;
            let (img_model, scale) = transfer.transfer_chw(&x_model.to_chw());
            let pred_raw = DomainImage::from_chw(
                &denormalize_chw(&img_model),
                ValueRange::Raw0255,
                gt.domain_tag,
                format!("{}-pred", x.source_id),
            )?;
            ssims.push(ssim(&pred_raw, &gt_raw)?);
            psnrs.push(cap_psnr(psnr(&pred_raw, &gt_raw)?));
            if collect_scale {
                if let Some(s) = scale {
                    scales.push(s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64);
                }
            }
        }
        let (sm, ss) = mean_std(&ssims);
        let (pm, ps) = mean_std(&psnrs);
        rows.push(ScenarioRow {
            scenario: sc.name(),
            ssim_mean: sm,
            ssim_std: ss,
            psnr_mean: pm,
            psnr_std: ps,
            mean_scale: if scales.is_empty() {
                None
            } else {
                Some(scales.iter().sum::<f64>() / scales.len() as f64)
            },
        });
    }
    Ok(EvalReport {
        rows,
        sample_count: eval_pairs.len(),
        config_echo: String::new(),
    })
}

// ---------------------------------------------------------------------------
// Uncertainty correlation
// ---------------------------------------------------------------------------

/// Per-image (mean absolute residual, mean scale) pairs plus their Pearson
/// correlation coefficient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub points: Vec<(String, f64, f64)>,
    pub pcc: f64,
    /// Set when either coordinate had zero variance (PCC reported as 0).
    pub degenerate: bool,
}

impl UncertaintyReport {
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("image_id,mean_abs_residual,mean_scale\n");
        for (id, r, s) in &self.points {
            let _ = writeln!(out, "{id},{r:.6},{s:.6}");
        }
        out
    }
}

/// Pearson correlation; zero variance in either coordinate yields
/// `(0.0, degenerate = true)`.
pub fn pearson(xs: &[f64], ys: &[f64]) -> (f64, bool) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in xs.iter().zip(ys.iter()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return (0.0, true);
    }
    (sxy / (sxx * syy).sqrt(), false)
}

/// Correlate per-image mean absolute residual (raw scale) with the mean
/// predicted scale over up to `sample_count` clean held-out pairs. Requires
/// a transfer that produces scale maps.
pub fn uncertainty_correlation<T: ImageTransfer>(
    transfer: &T,
    eval_pairs: &[(DomainImage, DomainImage)],
    sample_count: usize,
    seed: u64,
) -> Result<UncertaintyReport> {
    if eval_pairs.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    // deterministic subset when more pairs are available than requested
    let mut order: Vec<usize> = (0..eval_pairs.len()).collect();
    if eval_pairs.len() > sample_count {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(41);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.truncate(sample_count);
        order.sort_unstable();
    }
    let mut points = Vec::with_capacity(order.len());
    for &i in &order {
        let (x, gt) = &eval_pairs[i];
        let x_raw = to_raw(x)?;
        let gt_raw = to_raw(gt)?;
        let x_model = normalize(&x_raw)?;
        let (img_model, scale) = transfer.transfer_chw(&x_model.to_chw());
        let scale = scale.ok_or(Error::UnsupportedMode {
            mode: "PI (no scale head output)".into(),
        })?;
        let pred_raw = denormalize_chw(&img_model);
        let gt_chw = gt_raw.to_chw();
        let residual = (&pred_raw - &gt_chw).mapv(f32::abs);
        let mean_res = residual.iter().map(|&v| v as f64).sum::<f64>() / residual.len() as f64;
        let mean_scale = scale.iter().map(|&v| v as f64).sum::<f64>() / scale.len() as f64;
        points.push((x.source_id.clone(), mean_res, mean_scale));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.1).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.2).collect();
    let (pcc, degenerate) = pearson(&xs, &ys);
    Ok(UncertaintyReport {
        points,
        pcc,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{make_synthetic_dataset, DomainTag};
    use ndarray::Array3;

    fn raw_img(vals: Array3<f32>, id: &str) -> DomainImage {
        DomainImage::new(vals, ValueRange::Raw0255, DomainTag::InputX, id).unwrap()
    }

    fn rng_for(seed: u64) -> ChaCha12Rng {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        r.set_stream(40);
        r
    }

    #[test]
    fn scenario_names_and_parsing() {
        let set = Scenario::standard_set(0);
        let names: Vec<String> = set.iter().map(|s| s.name()).collect();
        assert_eq!(names, ["GN0", "GN5", "GN10", "GN20", "IP2", "IP5", "IP10"]);
        let parsed = Scenario::parse_list("GN0, IP2", 7).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[1].kind, PerturbationKind::ImpulseReplacement);
        assert_eq!(parsed[1].seed, 7);
        assert!(matches!(
            "XX7".parse::<Scenario>(),
            Err(Error::UnknownScenario { .. })
        ));
    }

    #[test]
    fn gn0_is_the_identity() {
        let img = raw_img(
            Array3::from_shape_fn((32, 32, 1), |(i, j, _)| ((i * 31 + j) % 256) as f32),
            "a",
        );
        let out = perturb(&img, &Scenario::clean(3), &mut rng_for(3)).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn gn5_noise_std_is_twelve_point_seven_five() {
        // mid-gray plane so clamping never bites; estimate std over many draws
        let img = raw_img(Array3::from_elem((64, 64, 1), 127.5), "g");
        let sc = Scenario {
            kind: PerturbationKind::GaussianNoise,
            level: 0.05,
            seed: 5,
        };
        let mut rng = rng_for(5);
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for _ in 0..50 {
            let out = perturb(&img, &sc, &mut rng).unwrap();
            for (&a, &b) in out.pixels.iter().zip(img.pixels.iter()) {
                let dlt = (a - b) as f64;
                acc += dlt * dlt;
                n += 1;
            }
        }
        let std = (acc / n as f64).sqrt();
        assert!(
            (std - 12.75).abs() < 0.15,
            "estimated noise std {std}, expected 12.75"
        );
    }

    #[test]
    fn ip2_replaces_exactly_the_floor_count() {
        let img = raw_img(
            Array3::from_shape_fn((256, 256, 1), |(i, j, _)| ((i * 7 + j * 13) % 256) as f32),
            "ip",
        );
        let sc = Scenario {
            kind: PerturbationKind::ImpulseReplacement,
            level: 0.02,
            seed: 11,
        };
        let out = perturb(&img, &sc, &mut rng_for(11)).unwrap();
        let differing = out
            .pixels
            .iter()
            .zip(img.pixels.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing, 1310); // floor(0.02 * 65536)
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img = raw_img(
            Array3::from_shape_fn((32, 32, 1), |(i, j, _)| ((i * j) % 251) as f32),
            "s",
        );
        let v = ssim(&img, &img).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    /// Independent scalar reference: direct per-window weighted moments.
    fn ssim_oracle(a: &DomainImage, b: &DomainImage) -> f64 {
        let (h, w, _) = a.pixels.dim();
        let k = 11usize;
        let sigma = 1.5f64;
        let c = (k / 2) as f64;
        let mut win = vec![vec![0.0f64; k]; k];
        let mut z = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, wv) in row.iter_mut().enumerate() {
                let dy = i as f64 - c;
                let dx = j as f64 - c;
                *wv = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                z += *wv;
            }
        }
        for row in win.iter_mut() {
            for wv in row.iter_mut() {
                *wv /= z;
            }
        }
        let c1 = (0.01f64 * 255.0).powi(2);
        let c2 = (0.03f64 * 255.0).powi(2);
        let mut acc = 0.0;
        let mut cnt = 0usize;
        for oi in 0..=(h - k) {
            for oj in 0..=(w - k) {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let av = a.pixels[[oi + i, oj + j, 0]] as f64;
                        let bv = b.pixels[[oi + i, oj + j, 0]] as f64;
                        let wv = win[i][j];
                        ma += wv * av;
                        mb += wv * bv;
                        saa += wv * av * av;
                        sbb += wv * bv * bv;
                        sab += wv * av * bv;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                cnt += 1;
            }
        }
        acc / cnt as f64
    }

    #[test]
    fn ssim_constant_extremes_match_oracle() {
        let a = raw_img(Array3::from_elem((16, 16, 1), 0.0), "z");
        let b = raw_img(Array3::from_elem((16, 16, 1), 255.0), "f");
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        // C1-dominated tiny positive value
        assert!(got > 0.0 && got < 1e-3, "{got}");
    }

    #[test]
    fn ssim_matches_independent_oracle_on_random_pairs() {
        let mut rng = rng_for(17);
        for _ in 0..3 {
            let a = raw_img(
                Array3::from_shape_fn((24, 24, 1), |_| rng.random_range(0.0..=255.0f64) as f32),
                "ra",
            );
            let b = raw_img(
                Array3::from_shape_fn((24, 24, 1), |_| rng.random_range(0.0..=255.0f64) as f32),
                "rb",
            );
            let got = ssim(&a, &b).unwrap();
            let want = ssim_oracle(&a, &b);
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_and_psnr_are_symmetric() {
        let mut rng = rng_for(19);
        let a = raw_img(
            Array3::from_shape_fn((16, 16, 1), |_| rng.random_range(0.0..=255.0f64) as f32),
            "sa",
        );
        let b = raw_img(
            Array3::from_shape_fn((16, 16, 1), |_| rng.random_range(0.0..=255.0f64) as f32),
            "sb",
        );
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_closed_forms() {
        let gt = raw_img(Array3::from_elem((16, 16, 1), 100.0), "gt");
        // identical: infinite, capped at 100 in aggregates
        assert!(psnr(&gt, &gt).unwrap().is_infinite());
        assert_eq!(cap_psnr(psnr(&gt, &gt).unwrap()), 100.0);
        // uniform +10 error: MSE = 100 -> 10 log10(65025/100)
        let pred = raw_img(Array3::from_elem((16, 16, 1), 110.0), "p");
        let v = psnr(&pred, &gt).unwrap();
        assert!((v - 28.130803608679344).abs() < 1e-9, "{v}");
        // peak-magnitude error everywhere: 0 dB
        let z = raw_img(Array3::from_elem((16, 16, 1), 0.0), "z");
        let f = raw_img(Array3::from_elem((16, 16, 1), 255.0), "f");
        assert!(psnr(&z, &f).unwrap().abs() < 1e-12);
        // shape mismatch is an error
        let small = raw_img(Array3::from_elem((8, 8, 1), 1.0), "s");
        assert!(psnr(&small, &gt).is_err());
    }

    #[test]
    fn pearson_props() {
        let (r, d) = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        assert!((r - 1.0).abs() < 1e-12 && !d);
        let (r, d) = pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]);
        assert_eq!(r, 0.0);
        assert!(d);
        // affine invariance and range
        let mut rng = rng_for(23);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&v| 0.8 * v + rng.random_range(-0.3..0.3))
            .collect();
        let (r0, _) = pearson(&xs, &ys);
        assert!((-1.0..=1.0).contains(&r0));
        let xs2: Vec<f64> = xs.iter().map(|&v| 3.7 * v - 11.0).collect();
        let ys2: Vec<f64> = ys.iter().map(|&v| 0.2 * v + 4.0).collect();
        let (r1, _) = pearson(&xs2, &ys2);
        assert!((r0 - r1).abs() < 1e-12);
    }

    #[test]
    fn identity_transfer_on_equal_domains_scores_perfectly() {
        // pairs whose input and ground truth are the same image
        let data = make_synthetic_dataset(31, 16, 32).unwrap();
        let pairs: Vec<_> = data
            .eval_pairs
            .iter()
            .take(4)
            .map(|(x, _)| (x.clone(), x.clone()))
            .collect();
        let report = evaluate(&IdentityTransfer, &pairs, &[Scenario::clean(0)], false).unwrap();
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert!((row.ssim_mean - 1.0).abs() < 1e-6, "{}", row.ssim_mean);
        assert_eq!(row.psnr_mean, 100.0);
        assert_eq!(report.sample_count, 4);
    }

    #[test]
    fn evaluate_requires_pairs_and_respects_scenario_list() {
        let err = evaluate(&IdentityTransfer, &[], &[Scenario::clean(0)], false);
        assert!(matches!(err, Err(Error::MissingGroundTruth)));
        let data = make_synthetic_dataset(37, 16, 32).unwrap();
        let pairs: Vec<_> = data.eval_pairs.iter().take(2).cloned().collect();
        let report = evaluate(&IdentityTransfer, &pairs, &[Scenario::clean(0)], false).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].scenario, "GN0");
    }

    #[test]
    fn uncertainty_correlation_needs_scale_maps() {
        let data = make_synthetic_dataset(41, 16, 32).unwrap();
        let pairs: Vec<_> = data.eval_pairs.iter().take(3).cloned().collect();
        let err = uncertainty_correlation(&IdentityTransfer, &pairs, 8, 0);
        assert!(matches!(err, Err(Error::UnsupportedMode { .. })));
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let img = raw_img(
            Array3::from_shape_fn((32, 32, 1), |(i, j, _)| ((i + j) % 256) as f32),
            "det",
        );
        let sc = Scenario {
            kind: PerturbationKind::GaussianNoise,
            level: 0.1,
            seed: 2,
        };
        let a = perturb(&img, &sc, &mut rng_for(2)).unwrap();
        let b = perturb(&img, &sc, &mut rng_for(2)).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }
}
