//! Command-line entry point wiring dataset synthesis, training, evaluation,
//! prediction, uncertainty reporting and the lambda grid search.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. All side effects
//! are confined to the resolved output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use patchinv_core::data_model::{
    denormalize_chw, load_manifest, make_synthetic_dataset, normalize, read_tensor_file,
    realize_manifest, save_manifest, write_tensor_file, DatasetManifest, DomainImage, DomainTag,
    UnpairedDataset, ValueRange,
};
use patchinv_core::evaluation::{evaluate, uncertainty_correlation, Scenario};
use patchinv_core::losses::PatchMode;
use patchinv_core::networks::GeneratorModel;
use patchinv_core::training::{grid_search_lambda, TrainRunConfig, Trainer};

const OUT_ROOT_ENV: &str = "PATCHINV_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "patchinv",
    version,
    about = "Unpaired image transfer with patch-invariant training and uncertainty maps"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct OutArg {
    /// Output directory (falls back to $PATCHINV_OUT_ROOT/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and a manifest describing it.
    MakeData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Images per training domain (eval pairs are half of this).
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// Side length (divisible by 32).
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Train a model per a run configuration.
    Train {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest; overrides the config's dataset entry.
        #[arg(long)]
        data: Option<PathBuf>,
        /// PI or UAPI.
        #[arg(long)]
        mode: Option<String>,
        /// Patch-loss weight.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Total generator updates.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Score a checkpoint on held-out pairs under perturbation scenarios.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated list (e.g. GN0,GN5,IP2); default is the full set.
        #[arg(long)]
        scenarios: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Transfer a directory of images (no ground truth required).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG directory or a .pit tensor file.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Residual-vs-scale correlation report (UAPI checkpoints only).
    UqReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[command(flatten)]
        out: OutArg,
    },
    /// Short training runs over a lambda grid; recommends the SSIM argmax.
    GridLambda {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated lambda values, e.g. 0,1,10.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        out: OutArg,
    },
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_out(out: &OutArg, sub: &str) -> Result<PathBuf, CliError> {
    let dir = match &out.out {
        Some(p) => p.clone(),
        None => match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(sub),
            None => {
                return Err(usage(format!(
                    "--out is required (or set ${OUT_ROOT_ENV})"
                )))
            }
        },
    };
    fs::create_dir_all(&dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
    Ok(dir)
}

fn write_version_stamp(dir: &Path) -> Result<(), CliError> {
    fs::write(
        dir.join("version.txt"),
        format!("patchinv {}\n", env!("CARGO_PKG_VERSION")),
    )
    .map_err(|e| CliError::Runtime(e.into()))
}

fn parse_mode(s: &str) -> Result<PatchMode, CliError> {
    match s {
        "PI" => Ok(PatchMode::PI),
        "UAPI" => Ok(PatchMode::UAPI),
        other => Err(usage(format!("unknown mode `{other}` (use PI or UAPI)"))),
    }
}

fn load_dataset(manifest_path: &Path) -> Result<UnpairedDataset, CliError> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    Ok(realize_manifest(&manifest, base)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::MakeData { seed, count, d, out } => {
            let dir = resolve_out(&out, "make-data")?;
            write_version_stamp(&dir)?;
            let data = make_synthetic_dataset(seed, count, d)?;
            write_tensor_file(&dir.join("inputs.pit"), &data.inputs)?;
            write_tensor_file(&dir.join("targets.pit"), &data.targets)?;
            let eval_x: Vec<DomainImage> =
                data.eval_pairs.iter().map(|(x, _)| x.clone()).collect();
            let eval_y: Vec<DomainImage> =
                data.eval_pairs.iter().map(|(_, y)| y.clone()).collect();
            write_tensor_file(&dir.join("eval_inputs.pit"), &eval_x)?;
            write_tensor_file(&dir.join("eval_targets.pit"), &eval_y)?;
            let manifest = DatasetManifest::Tensors {
                input_file: "inputs.pit".into(),
                target_file: "targets.pit".into(),
                eval_input_file: Some("eval_inputs.pit".into()),
                eval_target_file: Some("eval_targets.pit".into()),
            };
            save_manifest(&dir.join("manifest.toml"), &manifest)?;
            println!(
                "wrote {} train images per domain and {} eval pairs to {}",
                data.inputs.len(),
                data.eval_pairs.len(),
                dir.display()
            );
            Ok(())
        }

        Command::Train {
            config,
            data,
            mode,
            lambda,
            seed,
            steps,
            out,
        } => {
            let dir = resolve_out(&out, "train")?;
            write_version_stamp(&dir)?;
            let mut cfg = match &config {
                Some(path) => TrainRunConfig::load(path)?,
                None => TrainRunConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = parse_mode(&m)?;
            }
            if let Some(l) = lambda {
                cfg.patch_weight = l;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.generator_updates_total = n;
            }
            let manifest_path = data
                .or_else(|| {
                    cfg.dataset.as_ref().map(|p| {
                        // relative manifest paths resolve against the config file
                        match &config {
                            Some(cfile) if p.is_relative() => {
                                cfile.parent().unwrap_or(Path::new(".")).join(p)
                            }
                            _ => p.clone(),
                        }
                    })
                })
                .ok_or_else(|| usage("no dataset: pass --data or set `dataset` in the config"))?;
            cfg.dataset = Some(manifest_path.clone());
            cfg.save(&dir.join("effective_config.toml"))?;
            let dataset = load_dataset(&manifest_path)?;
            let mut trainer = Trainer::new(cfg, &dataset)?;
            trainer.run_dir = Some(dir.clone());
            let mut log = fs::File::create(dir.join("run_log.jsonl"))
                .map_err(|e| anyhow::anyhow!("run log: {e}"))?;
            trainer.train(&dataset, Some(&mut log))?;
            trainer.save_checkpoint(&dir.join("checkpoint_final.ckpt"))?;
            println!(
                "trained {} generator updates ({} critic updates); checkpoint at {}",
                trainer.generator_steps,
                trainer.critic_steps,
                dir.join("checkpoint_final.ckpt").display()
            );
            Ok(())
        }

        Command::Evaluate {
            checkpoint,
            data,
            scenarios,
            seed,
            out,
        } => {
            let dir = resolve_out(&out, "evaluate")?;
            write_version_stamp(&dir)?;
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let dataset = load_dataset(&data)?;
            if dataset.eval_pairs.is_empty() {
                return Err(CliError::Runtime(
                    patchinv_core::Error::MissingGroundTruth.into(),
                ));
            }
            let scenario_list = match scenarios {
                Some(s) => Scenario::parse_list(&s, seed).map_err(|e| usage(e.to_string()))?,
                None => Scenario::standard_set(seed),
            };
            let uapi = trainer.mode() == PatchMode::UAPI;
            let mut report = evaluate(
                &trainer.generator,
                &dataset.eval_pairs,
                &scenario_list,
                uapi,
            )?;
            report.config_echo = format!(
                "mode={} lambda={} checkpoint={}",
                trainer.config.mode,
                trainer.config.patch_weight,
                checkpoint.display()
            );
            fs::write(dir.join("report.csv"), report.to_csv())
                .map_err(|e| anyhow::anyhow!("report.csv: {e}"))?;
            fs::write(dir.join("report.txt"), report.to_text())
                .map_err(|e| anyhow::anyhow!("report.txt: {e}"))?;
            print!("{}", report.to_text());
            Ok(())
        }

        Command::Predict {
            checkpoint,
            input,
            out,
        } => {
            let dir = resolve_out(&out, "predict")?;
            write_version_stamp(&dir)?;
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            let uapi = trainer.mode() == PatchMode::UAPI;
            let images: Vec<DomainImage> = if input.is_dir() {
                patchinv_core::data_model::load_image_directory(&input, DomainTag::InputX)?
            } else {
                read_tensor_file(&input, DomainTag::InputX)?
            };
            let mut scale_maps: Vec<DomainImage> = Vec::new();
            for img in &images {
                let model_img = match img.value_range {
                    ValueRange::ModelMinus1To1 => img.clone(),
                    ValueRange::Raw0255 => normalize(img)?,
                };
                let out_pair = trainer
                    .generator
                    .forward(&model_img.to_chw().insert_axis(ndarray::Axis(0)));
                let pred_raw =
                    denormalize_chw(&out_pair.image.index_axis(ndarray::Axis(0), 0).to_owned());
                save_chw_png(&dir.join(format!("{}_transfer.png", img.source_id)), &pred_raw)?;
                if uapi {
                    let scale = out_pair.scale.index_axis(ndarray::Axis(0), 0).to_owned();
                    // min-max normalized visualization
                    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
                    for &v in scale.iter() {
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    let span = if hi > lo { hi - lo } else { 1.0 };
                    let vis = scale.mapv(|v| (v - lo) / span * 255.0);
                    save_chw_png(&dir.join(format!("{}_scale.png", img.source_id)), &vis)?;
                    scale_maps.push(DomainImage::from_chw(
                        &scale.mapv(|v| v.clamp(0.0, 255.0)),
                        ValueRange::Raw0255,
                        DomainTag::TargetY,
                        format!("{}-scale", img.source_id),
                    )?);
                }
            }
            if !scale_maps.is_empty() {
                write_tensor_file(&dir.join("scale_maps.pit"), &scale_maps)?;
            }
            println!("transferred {} images into {}", images.len(), dir.display());
            Ok(())
        }

        Command::UqReport {
            checkpoint,
            data,
            count,
            out,
        } => {
            let dir = resolve_out(&out, "uq-report")?;
            write_version_stamp(&dir)?;
            let trainer = Trainer::load_checkpoint(&checkpoint)?;
            if trainer.mode() != PatchMode::UAPI {
                return Err(CliError::Runtime(
                    patchinv_core::Error::UnsupportedMode {
                        mode: trainer.config.mode.to_string(),
                    }
                    .into(),
                ));
            }
            let dataset = load_dataset(&data)?;
            if dataset.eval_pairs.is_empty() {
                return Err(CliError::Runtime(
                    patchinv_core::Error::MissingGroundTruth.into(),
                ));
            }
            let report = uncertainty_correlation(
                &trainer.generator,
                &dataset.eval_pairs,
                count,
                trainer.config.seed,
            )?;
            fs::write(dir.join("scatter.csv"), report.scatter_csv())
                .map_err(|e| anyhow::anyhow!("scatter.csv: {e}"))?;
            let summary = format!(
                "pcc {:.6}\nsamples {}\ndegenerate {}\n",
                report.pcc,
                report.points.len(),
                report.degenerate
            );
            fs::write(dir.join("pcc.txt"), &summary)
                .map_err(|e| anyhow::anyhow!("pcc.txt: {e}"))?;
            print!("{summary}");
            Ok(())
        }

        Command::GridLambda {
            config,
            data,
            grid,
            out,
        } => {
            let dir = resolve_out(&out, "grid-lambda")?;
            write_version_stamp(&dir)?;
            let cfg = match &config {
                Some(path) => TrainRunConfig::load(path)?,
                None => TrainRunConfig::default(),
            };
            let lambdas: Vec<f64> = grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| usage(format!("bad lambda value `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            let dataset = load_dataset(&data)?;
            let result = grid_search_lambda(&cfg, &dataset, &lambdas)?;
            let mut csv = String::from("lambda,ssim,psnr\n");
            for row in &result.rows {
                csv.push_str(&format!(
                    "{},{:.6},{:.6}\n",
                    row.lambda, row.ssim, row.psnr
                ));
            }
            fs::write(dir.join("grid.csv"), &csv)
                .map_err(|e| anyhow::anyhow!("grid.csv: {e}"))?;
            fs::write(
                dir.join("recommendation.txt"),
                format!("lambda {}\n", result.recommended),
            )
            .map_err(|e| anyhow::anyhow!("recommendation.txt: {e}"))?;
            println!("recommended lambda: {}", result.recommended);
            Ok(())
        }
    }
}

/// Write a channel-major raw-range image as an 8-bit PNG (grayscale or RGB).
fn save_chw_png(path: &Path, chw: &ndarray::Array3<f32>) -> Result<(), CliError> {
    let (c, h, w) = chw.dim();
    let to_u8 = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([to_u8(chw[[0, y as usize, x as usize]])])
            });
            img.save(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        }
        3 => {
            let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                image::Rgb([
                    to_u8(chw[[0, y as usize, x as usize]]),
                    to_u8(chw[[1, y as usize, x as usize]]),
                    to_u8(chw[[2, y as usize, x as usize]]),
                ])
            });
            img.save(path)
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        }
        other => {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "cannot export {other}-channel image as PNG"
            )))
        }
    }
    Ok(())
}
