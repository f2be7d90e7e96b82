//! Canonical image types, normalization conventions, and ingestion of
//! unpaired domain datasets (image directories, raw tensor files, or the
//! synthetic phantom generator).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared pixel value range of a [`DomainImage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Original 8-bit scale `[0, 255]`; evaluation metrics live here.
    Raw0255,
    /// Model scale `[-1, 1]`; training and network IO live here.
    ModelMinus1To1,
}

impl ValueRange {
    fn name(self) -> &'static str {
        match self {
            ValueRange::Raw0255 => "raw_0_255",
            ValueRange::ModelMinus1To1 => "model_minus1_1",
        }
    }
}

/// Which side of the transfer an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainTag {
    InputX,
    TargetY,
}

/// A square image with provenance metadata; the unit of all pipelines.
///
/// Pixels are `[height, width, channels]`. Networks additionally require the
/// side length to be divisible by 32 (five downsampling stages); that is
/// checked where images meet a model, not at construction, so small images
/// remain usable in numeric tests.
#[derive(Debug, Clone)]
pub struct DomainImage {
    pub pixels: Array3<f32>,
    pub value_range: ValueRange,
    pub domain_tag: DomainTag,
    pub source_id: String,
}

impl DomainImage {
    pub fn new(
        pixels: Array3<f32>,
        value_range: ValueRange,
        domain_tag: DomainTag,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        let (h, w, _c) = pixels.dim();
        if h != w {
            return Err(Error::NotSquare {
                source_id,
                height: h,
                width: w,
            });
        }
        let img = DomainImage {
            pixels,
            value_range,
            domain_tag,
            source_id,
        };
        img.check_range()?;
        Ok(img)
    }

    pub fn side(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    fn bounds(range: ValueRange) -> (f32, f32) {
        match range {
            ValueRange::Raw0255 => (0.0, 255.0),
            ValueRange::ModelMinus1To1 => (-1.0, 1.0),
        }
    }

    fn check_range(&self) -> Result<()> {
        let (lo, hi) = Self::bounds(self.value_range);
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &v in self.pixels.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        // tiny slack absorbs float rounding from IO round-trips
        let slack = (hi - lo) * 1e-6;
        if min < lo - slack || max > hi + slack {
            return Err(Error::PixelRange {
                source_id: self.source_id.clone(),
                min,
                max,
                lo,
                hi,
            });
        }
        Ok(())
    }

    /// Verify the image can be fed to the networks (d divisible by 32).
    pub fn validate_for_model(&self) -> Result<()> {
        let d = self.side();
        if d < 32 || d % 32 != 0 {
            return Err(Error::SideNotDivisible { d });
        }
        Ok(())
    }

    /// Channel-major copy `[c, h, w]` of the pixel data.
    pub fn to_chw(&self) -> Array3<f32> {
        self.pixels
            .view()
            .permuted_axes([2, 0, 1])
            .to_owned()
            .as_standard_layout()
            .to_owned()
    }

    pub fn from_chw(
        chw: &Array3<f32>,
        value_range: ValueRange,
        domain_tag: DomainTag,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let hwc = chw
            .view()
            .permuted_axes([1, 2, 0])
            .to_owned()
            .as_standard_layout()
            .to_owned();
        DomainImage::new(hwc, value_range, domain_tag, source_id)
    }
}

/// Affine map `[0,255] -> [-1,1]`: `x / 127.5 - 1`.
pub fn normalize(img: &DomainImage) -> Result<DomainImage> {
    if img.value_range != ValueRange::Raw0255 {
        return Err(Error::ValueRange {
            expected: ValueRange::Raw0255.name(),
            actual: img.value_range.name(),
        });
    }
    img.check_range()?;
    let pixels = img.pixels.mapv(|v| v / 127.5 - 1.0);
    Ok(DomainImage {
        pixels,
        value_range: ValueRange::ModelMinus1To1,
        domain_tag: img.domain_tag,
        source_id: img.source_id.clone(),
    })
}

/// Inverse of [`normalize`] with clamping: `(x + 1) * 127.5`, clamped to
/// `[0, 255]`. Clamping absorbs generator overshoot.
pub fn denormalize(img: &DomainImage) -> Result<DomainImage> {
    if img.value_range != ValueRange::ModelMinus1To1 {
        return Err(Error::ValueRange {
            expected: ValueRange::ModelMinus1To1.name(),
            actual: img.value_range.name(),
        });
    }
    let pixels = img.pixels.mapv(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0));
    Ok(DomainImage {
        pixels,
        value_range: ValueRange::Raw0255,
        domain_tag: img.domain_tag,
        source_id: img.source_id.clone(),
    })
}

/// Clamped denormalization of a raw channel-major model output (no range
/// check on the input: generator outputs may overshoot `[-1, 1]`).
pub fn denormalize_chw(chw: &Array3<f32>) -> Array3<f32> {
    chw.mapv(|v| ((v + 1.0) * 127.5).clamp(0.0, 255.0))
}

/// Unpaired training collections plus optional aligned evaluation pairs.
///
/// Training code samples only `inputs` and `targets`; `eval_pairs` exist for
/// evaluation alone.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    pub inputs: Vec<DomainImage>,
    pub targets: Vec<DomainImage>,
    pub eval_pairs: Vec<(DomainImage, DomainImage)>,
}

impl UnpairedDataset {
    pub fn new(
        inputs: Vec<DomainImage>,
        targets: Vec<DomainImage>,
        eval_pairs: Vec<(DomainImage, DomainImage)>,
    ) -> Result<Self> {
        let target_ids: std::collections::HashSet<&str> =
            targets.iter().map(|t| t.source_id.as_str()).collect();
        for i in &inputs {
            if target_ids.contains(i.source_id.as_str()) {
                return Err(Error::DomainOverlap {
                    id: i.source_id.clone(),
                });
            }
        }
        Ok(UnpairedDataset {
            inputs,
            targets,
            eval_pairs,
        })
    }

    /// Side length shared by the training images.
    pub fn side(&self) -> Result<usize> {
        let d = self
            .inputs
            .first()
            .or_else(|| self.targets.first())
            .map(|i| i.side())
            .ok_or(Error::MissingGroundTruth)?;
        Ok(d)
    }

    pub fn input_channels(&self) -> usize {
        self.inputs.first().map(|i| i.channels()).unwrap_or(1)
    }

    pub fn target_channels(&self) -> usize {
        self.targets.first().map(|i| i.channels()).unwrap_or(1)
    }

    /// All source ids appearing in eval pairs.
    pub fn eval_ids(&self) -> Vec<&str> {
        self.eval_pairs
            .iter()
            .flat_map(|(a, b)| [a.source_id.as_str(), b.source_id.as_str()])
            .collect()
    }
}

/// Assemble a channel-major model batch `[n, c, d, d]` from images, converting
/// to model range if needed.
pub fn batch_from_images(images: &[&DomainImage]) -> Result<Array4<f32>> {
    assert!(!images.is_empty(), "empty batch");
    let d = images[0].side();
    let c = images[0].channels();
    let mut out = Array4::<f32>::zeros((images.len(), c, d, d));
    for (n, img) in images.iter().enumerate() {
        let model_img = match img.value_range {
            ValueRange::ModelMinus1To1 => (*img).clone(),
            ValueRange::Raw0255 => normalize(img)?,
        };
        if model_img.side() != d || model_img.channels() != c {
            return Err(Error::InconsistentShape {
                file: img.source_id.clone(),
                got: format!("{}x{}x{}", img.side(), img.side(), img.channels()),
                expected: format!("{d}x{d}x{c}"),
            });
        }
        out.index_axis_mut(Axis(0), n).assign(&model_img.to_chw());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

/// Fixed blur parameters of the synthetic domain transform.
const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: usize = 3;

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render one piecewise-smooth phantom: a smooth background ramp with a
/// random number of ellipses/rectangles carrying their own intensity ramps.
/// Backgrounds stay dark and shapes bright, so the domain is visibly
/// asymmetric under intensity inversion.
fn render_phantom(rng: &mut ChaCha12Rng, d: usize) -> Array3<f32> {
    let base: f64 = rng.random_range(5.0..=35.0);
    let bg_gu: f64 = rng.random_range(-15.0..=15.0);
    let bg_gv: f64 = rng.random_range(-15.0..=15.0);
    let n_shapes: usize = rng.random_range(1..=6);

    struct Shape {
        rect: bool,
        cx: f64,
        cy: f64,
        ax: f64,
        ay: f64,
        cos_t: f64,
        sin_t: f64,
        base: f64,
        gu: f64,
        gv: f64,
        feather: f64,
    }
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let rect = rng.random_range(0..2u8) == 0;
        shapes.push(Shape {
            rect,
            cx: rng.random_range(0.15..=0.85),
            cy: rng.random_range(0.15..=0.85),
            ax: rng.random_range(0.05..=0.18),
            ay: rng.random_range(0.05..=0.18),
            cos_t: 0.0,
            sin_t: 0.0,
            base: rng.random_range(150.0..=250.0),
            gu: rng.random_range(-50.0..=50.0),
            gv: rng.random_range(-50.0..=50.0),
            feather: rng.random_range(0.02..=0.06),
        });
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let s = shapes.last_mut().unwrap();
        s.cos_t = angle.cos();
        s.sin_t = angle.sin();
    }

    let mut img = Array3::<f32>::zeros((d, d, 1));
    for i in 0..d {
        for j in 0..d {
            let v = (i as f64 + 0.5) / d as f64;
            let u = (j as f64 + 0.5) / d as f64;
            let mut val = base + bg_gu * u + bg_gv * v;
            for s in &shapes {
                // local rotated coordinates
                let du = u - s.cx;
                let dv = v - s.cy;
                let lu = (du * s.cos_t + dv * s.sin_t) / s.ax;
                let lv = (-du * s.sin_t + dv * s.cos_t) / s.ay;
                let dist = if s.rect {
                    lu.abs().max(lv.abs())
                } else {
                    (lu * lu + lv * lv).sqrt()
                };
                let alpha = 1.0 - smoothstep(1.0 - s.feather, 1.0, dist);
                if alpha > 0.0 {
                    let shade = s.base + s.gu * lu + s.gv * lv;
                    val = val * (1.0 - alpha) + shade * alpha;
                }
            }
            img[[i, j, 0]] = val.clamp(0.0, 255.0) as f32;
        }
    }
    img
}

/// The closed-form domain transform: intensity inversion followed by a mild
/// Gaussian blur (sigma 1.0, radius 3, replicated edges). Raw range in, raw
/// range out.
pub fn synthetic_transform(raw: &Array3<f32>) -> Array3<f32> {
    let (h, w, c) = raw.dim();
    let inverted = raw.mapv(|v| 255.0 - v);
    // blur kernel
    let mut kernel = [0.0f64; 2 * BLUR_RADIUS + 1];
    let mut z = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let x = i as f64 - BLUR_RADIUS as f64;
        *k = (-x * x / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
        z += *k;
    }
    for k in kernel.iter_mut() {
        *k /= z;
    }
    let clamp = |v: isize, n: usize| -> usize { v.clamp(0, n as isize - 1) as usize };
    // horizontal
    let mut mid = Array3::<f32>::zeros((h, w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let jj = clamp(j as isize + t as isize - BLUR_RADIUS as isize, w);
                    acc += kv * inverted[[i, jj, ci]] as f64;
                }
                mid[[i, j, ci]] = acc as f32;
            }
        }
    }
    // vertical
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0f64;
                for (t, &kv) in kernel.iter().enumerate() {
                    let ii = clamp(i as isize + t as isize - BLUR_RADIUS as isize, h);
                    acc += kv * mid[[ii, j, ci]] as f64;
                }
                out[[i, j, ci]] = (acc as f32).clamp(0.0, 255.0);
            }
        }
    }
    out
}

/// Deterministic desk-scale dataset: domain X holds raw phantoms, domain Y
/// holds the transform of an independent phantom stream, and the evaluation
/// pairs render a third stream in both domains. Eval size is half of
/// `count_per_domain`.
pub fn make_synthetic_dataset(
    seed: u64,
    count_per_domain: usize,
    d: usize,
) -> Result<UnpairedDataset> {
    if d < 32 || d % 32 != 0 {
        return Err(Error::SideNotDivisible { d });
    }
    if count_per_domain < 16 {
        return Err(Error::InvalidConfig {
            reason: format!("count_per_domain must be >= 16, got {count_per_domain}"),
        });
    }
    let mut rng_x = ChaCha12Rng::seed_from_u64(seed);
    rng_x.set_stream(1);
    let mut rng_y = ChaCha12Rng::seed_from_u64(seed);
    rng_y.set_stream(2);
    let mut rng_e = ChaCha12Rng::seed_from_u64(seed);
    rng_e.set_stream(3);

    let mut inputs = Vec::with_capacity(count_per_domain);
    let mut targets = Vec::with_capacity(count_per_domain);
    for i in 0..count_per_domain {
        let px = render_phantom(&mut rng_x, d);
        inputs.push(DomainImage::new(
            px,
            ValueRange::Raw0255,
            DomainTag::InputX,
            format!("synX-{i:05}"),
        )?);
        let py = render_phantom(&mut rng_y, d);
        targets.push(DomainImage::new(
            synthetic_transform(&py),
            ValueRange::Raw0255,
            DomainTag::TargetY,
            format!("synY-{i:05}"),
        )?);
    }
    let eval_count = count_per_domain / 2;
    let mut eval_pairs = Vec::with_capacity(eval_count);
    for i in 0..eval_count {
        let p = render_phantom(&mut rng_e, d);
        let x = DomainImage::new(
            p.clone(),
            ValueRange::Raw0255,
            DomainTag::InputX,
            format!("synE-{i:05}"),
        )?;
        let y = DomainImage::new(
            synthetic_transform(&p),
            ValueRange::Raw0255,
            DomainTag::TargetY,
            format!("synE-{i:05}"),
        )?;
        eval_pairs.push((x, y));
    }
    UnpairedDataset::new(inputs, targets, eval_pairs)
}

// ---------------------------------------------------------------------------
// Image directory ingestion
// ---------------------------------------------------------------------------

/// Load a directory of uniform 8-bit PNG images, normalized to model range.
/// Files are read in lexicographic order.
pub fn load_image_directory(path: &Path, domain_tag: DomainTag) -> Result<Vec<DomainImage>> {
    let entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDomain {
            path: path.to_path_buf(),
        });
    }
    let mut out = Vec::with_capacity(files.len());
    let mut expected: Option<(usize, usize)> = None;
    for file in files {
        let name = file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dynimg = image::open(&file).map_err(|e| Error::UnreadableFile {
            file: name.clone(),
            reason: e.to_string(),
        })?;
        let (w, h, c, data): (usize, usize, usize, Vec<u8>) = match dynimg {
            image::DynamicImage::ImageLuma8(img) => {
                let (w, h) = img.dimensions();
                (w as usize, h as usize, 1, img.into_raw())
            }
            image::DynamicImage::ImageRgb8(img) => {
                let (w, h) = img.dimensions();
                (w as usize, h as usize, 3, img.into_raw())
            }
            other => {
                let img = other.to_luma8();
                let (w, h) = img.dimensions();
                (w as usize, h as usize, 1, img.into_raw())
            }
        };
        if h != w {
            return Err(Error::NotSquare {
                source_id: name,
                height: h,
                width: w,
            });
        }
        if let Some((ed, ec)) = expected {
            if ed != h || ec != c {
                return Err(Error::InconsistentShape {
                    file: name,
                    got: format!("{h}x{w}x{c}"),
                    expected: format!("{ed}x{ed}x{ec}"),
                });
            }
        } else {
            expected = Some((h, c));
        }
        let pixels = Array3::from_shape_vec((h, w, c), data.iter().map(|&b| b as f32).collect())
            .expect("raster shape");
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(name);
        let raw = DomainImage::new(pixels, ValueRange::Raw0255, domain_tag, stem)?;
        out.push(normalize(&raw)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Raw tensor container
// ---------------------------------------------------------------------------

const TENSOR_MAGIC: &[u8; 4] = b"PIT1";

/// Write images to the raw tensor container: magic, u32 d, u32 c, u32 count,
/// then `count * d * d * c` little-endian f32 values in raw `[0,255]` scale,
/// height-major per image.
pub fn write_tensor_file(path: &Path, images: &[DomainImage]) -> Result<()> {
    assert!(!images.is_empty(), "refusing to write an empty tensor file");
    let d = images[0].side();
    let c = images[0].channels();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(TENSOR_MAGIC).map_err(|e| Error::io(path, e))?;
    for v in [d as u32, c as u32, images.len() as u32] {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    let mut buf = Vec::with_capacity(d * d * c * 4);
    for img in images {
        let raw = match img.value_range {
            ValueRange::Raw0255 => img.clone(),
            ValueRange::ModelMinus1To1 => denormalize(img)?,
        };
        if raw.side() != d || raw.channels() != c {
            return Err(Error::InconsistentShape {
                file: img.source_id.clone(),
                got: format!("{}x{}", raw.side(), raw.channels()),
                expected: format!("{d}x{c}"),
            });
        }
        buf.clear();
        for &v in raw.pixels.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read a raw tensor container written by [`write_tensor_file`]. Source ids
/// are `"<stem>-<index>"`.
pub fn read_tensor_file(path: &Path, domain_tag: DomainTag) -> Result<Vec<DomainImage>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    if &header[0..4] != TENSOR_MAGIC {
        return Err(Error::UnreadableFile {
            file: path.display().to_string(),
            reason: "bad magic (not a PIT1 tensor file)".into(),
        });
    }
    let rd = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
    let (d, c, count) = (rd(4), rd(8), rd(12));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tensor".into());
    let mut out = Vec::with_capacity(count);
    let mut body = vec![0u8; d * d * c * 4];
    for i in 0..count {
        f.read_exact(&mut body).map_err(|e| Error::UnreadableFile {
            file: path.display().to_string(),
            reason: format!("truncated body at image {i}: {e}"),
        })?;
        let vals: Vec<f32> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let pixels = Array3::from_shape_vec((d, d, c), vals).expect("tensor shape");
        out.push(DomainImage::new(
            pixels,
            ValueRange::Raw0255,
            domain_tag,
            format!("{stem}-{i:05}"),
        )?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Plain-text description of where a dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetManifest {
    Synthetic {
        seed: u64,
        count_per_domain: usize,
        d: usize,
    },
    Directories {
        input_dir: PathBuf,
        target_dir: PathBuf,
        #[serde(default)]
        eval_input_dir: Option<PathBuf>,
        #[serde(default)]
        eval_target_dir: Option<PathBuf>,
    },
    Tensors {
        input_file: PathBuf,
        target_file: PathBuf,
        #[serde(default)]
        eval_input_file: Option<PathBuf>,
        #[serde(default)]
        eval_target_file: Option<PathBuf>,
    },
}

/// Wrapper table so the TOML reads `[dataset] kind = ...`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestFile {
    pub dataset: DatasetManifest,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: ManifestFile = toml::from_str(&text).map_err(|e| Error::InvalidConfig {
        reason: format!("manifest {}: {e}", path.display()),
    })?;
    Ok(parsed.dataset)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let file = ManifestFile {
        dataset: manifest.clone(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::InvalidConfig {
        reason: format!("manifest serialization: {e}"),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Materialize a manifest into an [`UnpairedDataset`]. Relative paths are
/// resolved against `base_dir`.
pub fn realize_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Result<UnpairedDataset> {
    let resolve = |p: &PathBuf| -> PathBuf {
        if p.is_absolute() {
            p.clone()
        } else {
            base_dir.join(p)
        }
    };
    match manifest {
        DatasetManifest::Synthetic {
            seed,
            count_per_domain,
            d,
        } => make_synthetic_dataset(*seed, *count_per_domain, *d),
        DatasetManifest::Directories {
            input_dir,
            target_dir,
            eval_input_dir,
            eval_target_dir,
        } => {
            let inputs = load_image_directory(&resolve(input_dir), DomainTag::InputX)?;
            let targets = load_image_directory(&resolve(target_dir), DomainTag::TargetY)?;
            let eval_pairs = match (eval_input_dir, eval_target_dir) {
                (Some(ei), Some(et)) => {
                    let xs = load_image_directory(&resolve(ei), DomainTag::InputX)?;
                    let ys = load_image_directory(&resolve(et), DomainTag::TargetY)?;
                    zip_eval_pairs(xs, ys)?
                }
                _ => Vec::new(),
            };
            UnpairedDataset::new(inputs, targets, eval_pairs)
        }
        DatasetManifest::Tensors {
            input_file,
            target_file,
            eval_input_file,
            eval_target_file,
        } => {
            let inputs = read_tensor_file(&resolve(input_file), DomainTag::InputX)?;
            let targets = read_tensor_file(&resolve(target_file), DomainTag::TargetY)?;
            let eval_pairs = match (eval_input_file, eval_target_file) {
                (Some(ei), Some(et)) => {
                    let xs = read_tensor_file(&resolve(ei), DomainTag::InputX)?;
                    let ys = read_tensor_file(&resolve(et), DomainTag::TargetY)?;
                    zip_eval_pairs(xs, ys)?
                }
                _ => Vec::new(),
            };
            UnpairedDataset::new(inputs, targets, eval_pairs)
        }
    }
}

fn zip_eval_pairs(
    xs: Vec<DomainImage>,
    ys: Vec<DomainImage>,
) -> Result<Vec<(DomainImage, DomainImage)>> {
    if xs.len() != ys.len() {
        return Err(Error::BatchMismatch {
            what: "eval pair collections",
            got: ys.len(),
            expected: xs.len(),
        });
    }
    Ok(xs.into_iter().zip(ys).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img_raw(vals: &[f32], d: usize, id: &str) -> DomainImage {
        let pixels = Array3::from_shape_vec((d, d, 1), vals.to_vec()).unwrap();
        DomainImage::new(pixels, ValueRange::Raw0255, DomainTag::InputX, id).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let img = img_raw(&[0.0, 255.0, 127.5, 64.0], 2, "t");
        let n = normalize(&img).unwrap();
        assert_eq!(n.pixels[[0, 0, 0]], -1.0);
        assert_eq!(n.pixels[[0, 1, 0]], 1.0);
        assert_eq!(n.pixels[[1, 0, 0]], 0.0);
        assert_eq!(n.value_range, ValueRange::ModelMinus1To1);
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        let pixels = Array3::from_elem((2, 2, 1), 300.0f32);
        let img = DomainImage {
            pixels,
            value_range: ValueRange::Raw0255,
            domain_tag: DomainTag::InputX,
            source_id: "bad".into(),
        };
        assert!(matches!(normalize(&img), Err(Error::PixelRange { .. })));
    }

    #[test]
    fn round_trip_within_tolerance() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let vals: Vec<f32> = (0..64).map(|_| rng.random_range(0.0..=255.0f64) as f32).collect();
        let img = img_raw(&vals, 8, "rt");
        let back = denormalize(&normalize(&img).unwrap()).unwrap();
        for (a, b) in back.pixels.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() <= 1e-6 * 255.0 + 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn denormalize_clamps_overshoot() {
        let pixels = Array3::from_elem((2, 2, 1), 1.2f32);
        let img = DomainImage {
            pixels,
            value_range: ValueRange::ModelMinus1To1,
            domain_tag: DomainTag::TargetY,
            source_id: "over".into(),
        };
        let d = denormalize(&img).unwrap();
        assert_eq!(d.pixels[[0, 0, 0]], 255.0);
        let m = img_raw(&[0.0, 255.0, 10.0, 20.0], 2, "m");
        let again = normalize(&denormalize(&normalize(&m).unwrap()).unwrap()).unwrap();
        for (a, b) in again.pixels.iter().zip(normalize(&m).unwrap().pixels.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn synthetic_dataset_is_deterministic() {
        let a = make_synthetic_dataset(7, 16, 32).unwrap();
        let b = make_synthetic_dataset(7, 16, 32).unwrap();
        assert_eq!(a.inputs.len(), 16);
        assert_eq!(a.eval_pairs.len(), 8);
        for (ia, ib) in a.inputs.iter().zip(b.inputs.iter()) {
            assert_eq!(ia.pixels, ib.pixels, "bitwise determinism");
            assert_eq!(ia.source_id, ib.source_id);
        }
        for ((xa, ya), (xb, yb)) in a.eval_pairs.iter().zip(b.eval_pairs.iter()) {
            assert_eq!(xa.pixels, xb.pixels);
            assert_eq!(ya.pixels, yb.pixels);
        }
    }

    #[test]
    fn eval_pairs_satisfy_the_analytic_transform() {
        let data = make_synthetic_dataset(3, 16, 32).unwrap();
        for (x, y) in &data.eval_pairs {
            let t = synthetic_transform(&x.pixels);
            for (a, b) in t.iter().zip(y.pixels.iter()) {
                assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn domains_share_no_source_ids() {
        let data = make_synthetic_dataset(5, 16, 32).unwrap();
        let targets: std::collections::HashSet<_> =
            data.targets.iter().map(|t| t.source_id.clone()).collect();
        for i in &data.inputs {
            assert!(!targets.contains(&i.source_id));
        }
        // and the constructor enforces it
        let dup = UnpairedDataset::new(
            vec![data.inputs[0].clone()],
            vec![DomainImage {
                domain_tag: DomainTag::TargetY,
                ..data.inputs[0].clone()
            }],
            vec![],
        );
        assert!(matches!(dup, Err(Error::DomainOverlap { .. })));
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(matches!(
            make_synthetic_dataset(0, 16, 48),
            Err(Error::SideNotDivisible { .. })
        ));
        assert!(matches!(
            make_synthetic_dataset(0, 8, 32),
            Err(Error::InvalidConfig { .. })
        ));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.pit");
        let data = make_synthetic_dataset(11, 16, 32).unwrap();
        write_tensor_file(&path, &data.inputs).unwrap();
        let back = read_tensor_file(&path, DomainTag::InputX).unwrap();
        assert_eq!(back.len(), data.inputs.len());
        for (a, b) in back.iter().zip(data.inputs.iter()) {
            assert_eq!(a.pixels, b.pixels);
        }
    }

    #[test]
    fn tensor_file_bad_magic_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.pit");
        fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(
            read_tensor_file(&path, DomainTag::InputX),
            Err(Error::UnreadableFile { .. })
        ));
    }

    #[test]
    fn image_directory_loading_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // three consistent grayscale files
        for i in 0..3 {
            let img = image::GrayImage::from_fn(48, 48, |x, y| {
                image::Luma([((x + y + i) % 256) as u8])
            });
            img.save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        let loaded = load_image_directory(dir.path(), DomainTag::InputX).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].side(), 48);
        assert_eq!(loaded[0].channels(), 1);
        assert_eq!(loaded[0].value_range, ValueRange::ModelMinus1To1);

        // an inconsistent file must be rejected by name
        let odd = image::GrayImage::from_fn(24, 24, |_, _| image::Luma([7u8]));
        odd.save(dir.path().join("zzz_odd.png")).unwrap();
        let err = load_image_directory(dir.path(), DomainTag::InputX).unwrap_err();
        match err {
            Error::InconsistentShape { file, .. } => assert!(file.contains("zzz_odd")),
            other => panic!("unexpected error {other}"),
        }

        // non-square file
        let dir2 = tempfile::tempdir().unwrap();
        let rect = image::GrayImage::from_fn(48, 32, |_, _| image::Luma([1u8]));
        rect.save(dir2.path().join("rect.png")).unwrap();
        assert!(matches!(
            load_image_directory(dir2.path(), DomainTag::InputX),
            Err(Error::NotSquare { .. })
        ));

        // empty directory
        let dir3 = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image_directory(dir3.path(), DomainTag::InputX),
            Err(Error::EmptyDomain { .. })
        ));
    }

    #[test]
    fn manifest_round_trip_and_realize() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::Synthetic {
            seed: 9,
            count_per_domain: 16,
            d: 32,
        };
        let path = dir.path().join("manifest.toml");
        save_manifest(&path, &m).unwrap();
        let back = load_manifest(&path).unwrap();
        let data = realize_manifest(&back, dir.path()).unwrap();
        assert_eq!(data.inputs.len(), 16);
        let direct = make_synthetic_dataset(9, 16, 32).unwrap();
        assert_eq!(data.inputs[0].pixels, direct.inputs[0].pixels);
    }

    #[test]
    fn batch_assembly_normalizes_raw_images() {
        let data = make_synthetic_dataset(2, 16, 32).unwrap();
        let refs: Vec<_> = data.inputs.iter().take(3).collect();
        let batch = batch_from_images(&refs).unwrap();
        assert_eq!(batch.dim(), (3, 1, 32, 32));
        for &v in batch.iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
