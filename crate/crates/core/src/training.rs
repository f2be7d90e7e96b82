//! Alternating critic/generator optimization with checkpointing, structured
//! logging, determinism controls and the lambda grid-search helper.
//!
//! One cycle is `critic_steps_per_cycle` critic updates followed by a single
//! generator update; training runs until `generator_updates_total` generator
//! updates have been made. No learning-rate schedule, no extra augmentation.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array4;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{batch_from_images, UnpairedDataset};
use crate::error::{Error, Result};
use crate::losses::{
    critic_risk_backward, generator_risk_backward, CriticRiskOptions, GeneratorRiskOptions,
    LossBreakdown, PatchMode,
};
use crate::networks::{
    ConvCritic, CriticSpec, GeneratorSpec, ModelSpec, UNetGenerator, CRITIC_DEFAULT_WIDTH,
    GENERATOR_DEFAULT_WIDTH,
};
use crate::nn::{Adam, ParamSet};
use crate::patch_ops::{sample_patch_config, PatchConfig};

/// All hyperparameters of a run. The defaults are the published training
/// configuration; width/flag fields are the artifact's own knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainRunConfig {
    pub mode: PatchMode,
    pub batch_size: usize,
    pub critic_steps_per_cycle: usize,
    pub generator_updates_total: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Gradient-penalty influence `p`.
    pub penalty_weight: f64,
    /// Patch-loss influence `lambda`.
    pub patch_weight: f64,
    pub seed: u64,
    /// Write a checkpoint every this many generator updates (0 = final only).
    pub checkpoint_every: usize,
    pub generator_width: usize,
    pub critic_width: usize,
    pub sigma_min: f64,
    /// Wasserstein terms on patches (critic) and the patch adversarial term
    /// (generator). Disabling this plus `patch_weight = 0` reduces the loop
    /// to a plain WGAN-GP trainer.
    pub patch_terms: bool,
    /// Extend the gradient penalty to patch interpolates.
    pub penalty_on_patches: bool,
    /// Dataset manifest path; command-line values override this.
    pub dataset: Option<PathBuf>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            mode: PatchMode::UAPI,
            batch_size: 8,
            critic_steps_per_cycle: 15,
            generator_updates_total: 15_000,
            lr_generator: 5e-5,
            lr_critic: 2e-5,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            adam_epsilon: 1e-8,
            penalty_weight: 10.0,
            patch_weight: 10.0,
            seed: 0,
            checkpoint_every: 0,
            generator_width: GENERATOR_DEFAULT_WIDTH,
            critic_width: CRITIC_DEFAULT_WIDTH,
            sigma_min: crate::networks::DEFAULT_SIGMA_MIN,
            patch_terms: true,
            penalty_on_patches: false,
            dataset: None,
        }
    }
}

impl TrainRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig {
            reason: format!("run config {}: {e}", path.display()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig {
            reason: format!("run config serialization: {e}"),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which half of the min-max game a log record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Critic,
    Generator,
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub phase: Phase,
    pub cycle: u64,
    pub total: f64,
    pub adversarial_full: f64,
    pub adversarial_patch: f64,
    pub patch_term: f64,
    pub penalty_term: f64,
    pub wall_ms: f64,
}

/// Without-replacement sampler, reshuffled per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpochSampler {
    perm: Vec<u32>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler {
            perm: (0..n as u32).collect(),
            cursor: n, // forces a shuffle on first draw
        }
    }

    fn shuffle(&mut self, rng: &mut ChaCha12Rng) {
        let n = self.perm.len();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            self.perm.swap(i, j);
        }
        self.cursor = 0;
    }

    fn draw(&mut self, rng: &mut ChaCha12Rng, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor >= self.perm.len() {
                self.shuffle(rng);
            }
            out.push(self.perm[self.cursor] as usize);
            self.cursor += 1;
        }
        out
    }
}

/// Owns the model pair, optimizer state and RNG of a training run.
pub struct Trainer {
    pub config: TrainRunConfig,
    pub spec: ModelSpec,
    pub generator: UNetGenerator<f32>,
    pub critic: ConvCritic<f32>,
    opt_g: Adam<f32>,
    opt_c: Adam<f32>,
    rng: ChaCha12Rng,
    x_sampler: EpochSampler,
    y_sampler: EpochSampler,
    pub generator_steps: u64,
    pub critic_steps: u64,
    pub records: Vec<LogRecord>,
    /// Directory for diagnostic/periodic checkpoints, if any.
    pub run_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainRunConfig, data: &UnpairedDataset) -> Result<Self> {
        if data.inputs.is_empty() || data.targets.is_empty() {
            return Err(Error::InvalidConfig {
                reason: "dataset must be nonempty in both domains".into(),
            });
        }
        let d = data.side()?;
        let c_in = data.input_channels();
        let c_out = data.target_channels();
        let mut gspec = GeneratorSpec::new(d, c_in, c_out, config.generator_width)?;
        gspec.sigma_min = config.sigma_min;
        let cspec = CriticSpec::new(d, c_out, config.critic_width)?;
        let mut init_g = ChaCha12Rng::seed_from_u64(config.seed);
        init_g.set_stream(10);
        let mut init_c = ChaCha12Rng::seed_from_u64(config.seed);
        init_c.set_stream(11);
        let generator = UNetGenerator::new(gspec.clone(), &mut init_g)?;
        let critic = ConvCritic::new(cspec.clone(), &mut init_c)?;
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        rng.set_stream(12);
        let opt_g = Adam::new(
            config.lr_generator,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
            generator.n_params(),
        );
        let opt_c = Adam::new(
            config.lr_critic,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
            critic.n_params(),
        );
        Ok(Trainer {
            config,
            spec: ModelSpec {
                generator: gspec,
                critic: cspec,
            },
            generator,
            critic,
            opt_g,
            opt_c,
            rng,
            x_sampler: EpochSampler::new(data.inputs.len()),
            y_sampler: EpochSampler::new(data.targets.len()),
            generator_steps: 0,
            critic_steps: 0,
            records: Vec::new(),
            run_dir: None,
        })
    }

    pub fn mode(&self) -> PatchMode {
        self.config.mode
    }

    fn critic_opts(&self) -> CriticRiskOptions {
        CriticRiskOptions {
            patch_terms: self.config.patch_terms,
            penalty_on_patches: self.config.penalty_on_patches,
        }
    }

    fn generator_opts(&self) -> GeneratorRiskOptions {
        GeneratorRiskOptions {
            patch_adversarial: self.config.patch_terms,
        }
    }

    fn draw_x_batch(&mut self, data: &UnpairedDataset) -> Result<Array4<f32>> {
        let idx = self.x_sampler.draw(&mut self.rng, self.config.batch_size);
        let refs: Vec<_> = idx.iter().map(|&i| &data.inputs[i]).collect();
        batch_from_images(&refs)
    }

    fn draw_y_batch(&mut self, data: &UnpairedDataset) -> Result<Array4<f32>> {
        let idx = self.y_sampler.draw(&mut self.rng, self.config.batch_size);
        let refs: Vec<_> = idx.iter().map(|&i| &data.targets[i]).collect();
        batch_from_images(&refs)
    }

    fn draw_patch_cfgs(&mut self, d: usize) -> Vec<PatchConfig> {
        (0..self.config.batch_size)
            .map(|_| sample_patch_config(&mut self.rng, d))
            .collect()
    }

    fn guard_finite(&mut self, bd: &LossBreakdown, phase: &'static str, step: u64) -> Result<()> {
        if bd.total.is_finite() {
            return Ok(());
        }
        let checkpoint = self.run_dir.clone().map(|dir| dir.join("diagnostic.ckpt"));
        if let Some(path) = &checkpoint {
            let _ = self.save_checkpoint(path);
        }
        Err(Error::NonFiniteLoss {
            step,
            phase,
            checkpoint,
        })
    }

    /// One critic minibatch update. Generator parameters are untouched.
    pub fn critic_step(&mut self, data: &UnpairedDataset) -> Result<LossBreakdown> {
        let t0 = Instant::now();
        let d = self.spec.generator.d;
        let x = self.draw_x_batch(data)?;
        let y = self.draw_y_batch(data)?;
        let cfgs = self.draw_patch_cfgs(d);
        let eps: Vec<f64> = (0..self.config.batch_size)
            .map(|_| self.rng.random_range(0.0..=1.0))
            .collect();
        self.critic.zero_grads();
        let opts = self.critic_opts();
        let bd = critic_risk_backward(
            &mut self.critic,
            &self.generator,
            &y,
            &x,
            self.config.penalty_weight,
            &cfgs,
            &eps,
            &opts,
        )?;
        self.guard_finite(&bd, "critic", self.critic_steps + 1)?;
        self.opt_c.step(&mut self.critic);
        self.critic_steps += 1;
        self.records.push(LogRecord {
            step: self.critic_steps,
            phase: Phase::Critic,
            cycle: self.generator_steps + 1,
            total: bd.total,
            adversarial_full: bd.adversarial_full,
            adversarial_patch: bd.adversarial_patch,
            patch_term: bd.patch_term,
            penalty_term: bd.penalty_term,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        Ok(bd)
    }

    /// One generator minibatch update. Critic parameters are untouched.
    pub fn generator_step(&mut self, data: &UnpairedDataset) -> Result<LossBreakdown> {
        let t0 = Instant::now();
        let d = self.spec.generator.d;
        let x = self.draw_x_batch(data)?;
        let cfgs = self.draw_patch_cfgs(d);
        self.generator.zero_grads();
        let opts = self.generator_opts();
        let bd = generator_risk_backward(
            &mut self.generator,
            &self.critic,
            &x,
            &cfgs,
            self.config.patch_weight,
            self.config.mode,
            &opts,
        )?;
        self.guard_finite(&bd, "generator", self.generator_steps + 1)?;
        self.opt_g.step(&mut self.generator);
        self.generator_steps += 1;
        self.records.push(LogRecord {
            step: self.generator_steps,
            phase: Phase::Generator,
            cycle: self.generator_steps,
            total: bd.total,
            adversarial_full: bd.adversarial_full,
            adversarial_patch: bd.adversarial_patch,
            patch_term: bd.patch_term,
            penalty_term: bd.penalty_term,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        Ok(bd)
    }

    /// Run the configured schedule to completion, optionally streaming log
    /// records as JSON lines into `sink`.
    pub fn train(&mut self, data: &UnpairedDataset, mut sink: Option<&mut dyn Write>) -> Result<()> {
        while self.generator_steps < self.config.generator_updates_total as u64 {
            let first_new = self.records.len();
            for _ in 0..self.config.critic_steps_per_cycle {
                self.critic_step(data)?;
            }
            self.generator_step(data)?;
            if let Some(s) = sink.as_deref_mut() {
                for rec in &self.records[first_new..] {
                    let line = serde_json::to_string(rec).expect("record serializes");
                    writeln!(s, "{line}").map_err(|e| Error::io("run log", e))?;
                }
            }
            if self.config.checkpoint_every > 0
                && self.generator_steps % self.config.checkpoint_every as u64 == 0
            {
                if let Some(dir) = self.run_dir.clone() {
                    self.save_checkpoint(
                        &dir.join(format!("checkpoint_{:06}.ckpt", self.generator_steps)),
                    )?;
                }
            }
        }
        Ok(())
    }

    // -- checkpointing -------------------------------------------------

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            spec: self.spec.clone(),
            spec_hash: self.spec.hash(),
            generator_steps: self.generator_steps,
            critic_steps: self.critic_steps,
            adam_t_g: self.opt_g.t,
            adam_t_c: self.opt_c.t,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos_lo: self.rng.get_word_pos() as u64,
            rng_word_pos_hi: (self.rng.get_word_pos() >> 64) as u64,
            x_sampler: self.x_sampler.clone(),
            y_sampler: self.y_sampler.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        f.write_all(&header_json).map_err(|e| Error::io(path, e))?;
        let write_blob = |f: &mut fs::File, data: &[f32]| -> Result<()> {
            let mut buf = Vec::with_capacity(data.len() * 4 + 8);
            buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            f.write_all(&buf).map_err(|e| Error::io(path, e))
        };
        write_blob(&mut f, &self.generator.read_params())?;
        write_blob(&mut f, &self.critic.read_params())?;
        write_blob(&mut f, &self.opt_g.m)?;
        write_blob(&mut f, &self.opt_g.v)?;
        write_blob(&mut f, &self.opt_c.m)?;
        write_blob(&mut f, &self.opt_c.v)?;
        Ok(())
    }

    /// Restore a trainer from a checkpoint, verifying the stored spec hash.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        if !path.exists() {
            return Err(Error::CheckpointMissing {
                path: path.to_path_buf(),
            });
        }
        let corrupt = |reason: String| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| corrupt("truncated magic".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len)
            .map_err(|_| corrupt("truncated header length".into()))?;
        let hlen = u64::from_le_bytes(len) as usize;
        let mut hjson = vec![0u8; hlen];
        f.read_exact(&mut hjson)
            .map_err(|_| corrupt("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hjson).map_err(|e| corrupt(format!("header: {e}")))?;
        if header.spec.hash() != header.spec_hash {
            return Err(Error::SpecHashMismatch {
                found: header.spec_hash.clone(),
                expected: header.spec.hash(),
            });
        }
        let read_blob = |f: &mut fs::File| -> Result<Vec<f32>> {
            let mut len = [0u8; 8];
            f.read_exact(&mut len)
                .map_err(|_| corrupt("truncated blob length".into()))?;
            let n = u64::from_le_bytes(len) as usize;
            let mut raw = vec![0u8; n * 4];
            f.read_exact(&mut raw)
                .map_err(|_| corrupt("truncated blob".into()))?;
            Ok(raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect())
        };
        let theta = read_blob(&mut f)?;
        let omega = read_blob(&mut f)?;
        let m_g = read_blob(&mut f)?;
        let v_g = read_blob(&mut f)?;
        let m_c = read_blob(&mut f)?;
        let v_c = read_blob(&mut f)?;

        let mut scratch = ChaCha12Rng::seed_from_u64(0);
        let mut generator = UNetGenerator::new(header.spec.generator.clone(), &mut scratch)?;
        let mut critic = ConvCritic::new(header.spec.critic.clone(), &mut scratch)?;
        if theta.len() != generator.n_params() || omega.len() != critic.n_params() {
            return Err(corrupt("parameter blob length mismatch".into()));
        }
        generator.write_params(&theta);
        critic.write_params(&omega);

        let seed: [u8; 32] = header
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| corrupt("rng seed length".into()))?;
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(((header.rng_word_pos_hi as u128) << 64) | header.rng_word_pos_lo as u128);

        let mut opt_g = Adam::new(
            header.config.lr_generator,
            header.config.adam_beta1,
            header.config.adam_beta2,
            header.config.adam_epsilon,
            theta.len(),
        );
        opt_g.t = header.adam_t_g;
        opt_g.m = m_g;
        opt_g.v = v_g;
        let mut opt_c = Adam::new(
            header.config.lr_critic,
            header.config.adam_beta1,
            header.config.adam_beta2,
            header.config.adam_epsilon,
            omega.len(),
        );
        opt_c.t = header.adam_t_c;
        opt_c.m = m_c;
        opt_c.v = v_c;
        if opt_g.m.len() != theta.len()
            || opt_g.v.len() != theta.len()
            || opt_c.m.len() != omega.len()
            || opt_c.v.len() != omega.len()
        {
            return Err(corrupt("optimizer blob length mismatch".into()));
        }

        Ok(Trainer {
            config: header.config,
            spec: header.spec,
            generator,
            critic,
            opt_g,
            opt_c,
            rng,
            x_sampler: header.x_sampler,
            y_sampler: header.y_sampler,
            generator_steps: header.generator_steps,
            critic_steps: header.critic_steps,
            records: Vec::new(),
            run_dir: None,
        })
    }

    /// Like [`Trainer::load_checkpoint`] but additionally requires the file
    /// to match an expected model spec.
    pub fn load_checkpoint_expecting(path: &Path, expected: &ModelSpec) -> Result<Trainer> {
        let t = Self::load_checkpoint(path)?;
        if t.spec.hash() != expected.hash() {
            return Err(Error::SpecHashMismatch {
                found: t.spec.hash(),
                expected: expected.hash(),
            });
        }
        Ok(t)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"PICKPT01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainRunConfig,
    spec: ModelSpec,
    spec_hash: String,
    generator_steps: u64,
    critic_steps: u64,
    adam_t_g: u64,
    adam_t_c: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos_lo: u64,
    rng_word_pos_hi: u64,
    x_sampler: EpochSampler,
    y_sampler: EpochSampler,
}

/// One row of a lambda grid search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub rows: Vec<GridRow>,
    pub recommended: f64,
}

/// Short training runs per candidate lambda (a tenth of the configured
/// update budget each), evaluated on the held-out pairs without
/// perturbation. Recommends the SSIM argmax; ties break toward smaller
/// lambda.
pub fn grid_search_lambda(
    base: &TrainRunConfig,
    data: &UnpairedDataset,
    grid: &[f64],
) -> Result<GridSearchResult> {
    if data.eval_pairs.is_empty() {
        return Err(Error::MissingGroundTruth);
    }
    let mut lambdas: Vec<f64> = grid.to_vec();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lambdas.dedup();
    if lambdas.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let mut cfg = base.clone();
        cfg.patch_weight = lambda;
        cfg.generator_updates_total = (base.generator_updates_total / 10).max(1);
        let mut trainer = Trainer::new(cfg, data)?;
        trainer.train(data, None)?;
        let scenario = crate::evaluation::Scenario::clean(base.seed);
        let report = crate::evaluation::evaluate(
            &trainer.generator,
            &data.eval_pairs,
            &[scenario],
            trainer.mode() == PatchMode::UAPI,
        )?;
        let row = &report.rows[0];
        rows.push(GridRow {
            lambda,
            ssim: row.ssim_mean,
            psnr: row.psnr_mean,
        });
    }
    let mut best = 0usize;
    for (i, row) in rows.iter().enumerate() {
        if row.ssim > rows[best].ssim {
            best = i;
        }
    }
    Ok(GridSearchResult {
        recommended: rows[best].lambda,
        rows,
    })
}
