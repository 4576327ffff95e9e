//! Two-phase optimization, Adam, checkpoints and run logs.
//!
//! Training is a pure function of its configuration: patch selection and ray
//! jitter for step `s` come from per-step random streams keyed by `s`, so a
//! run resumed from a checkpoint replays exactly the numbers an
//! uninterrupted run would have drawn.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::HashGridConfig;
use crate::error::{Error, Result};
use crate::field::{ClassTableMask, FieldConfig};
use crate::loss::{first_non_finite, LossReport, LossWeights, Phase, Term};
use crate::model::{Model, BLOCK_NAMES, STATIC_BLOCKS};
use crate::pipeline::{forward_backward, place_samples, SamplingConfig, StepBatch, StepOptions};
use crate::rng::{self, Substream};
use crate::scene::{generate_scene_with, Dataset, SceneOptions, SyntheticScene, PATCH_SIZE, SCENE_NAMES};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DUOC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Design choices that can be switched off for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Toggle {
    Depth,
    Sem,
    Robust,
    Road,
    #[serde(rename = "sigmaD")]
    SigmaD,
    Fgmask,
}

impl Toggle {
    pub const ALL: [Toggle; 6] = [Toggle::Depth, Toggle::Sem, Toggle::Robust, Toggle::Road, Toggle::SigmaD, Toggle::Fgmask];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::Depth => "depth",
            Toggle::Sem => "sem",
            Toggle::Robust => "robust",
            Toggle::Road => "road",
            Toggle::SigmaD => "sigmaD",
            Toggle::Fgmask => "fgmask",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Toggle::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| {
                let known: Vec<&str> = Toggle::ALL.iter().map(|t| t.name()).collect();
                Error::Config(format!("unknown toggle `{name}` (expected one of {})", known.join(", ")))
            })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-15 }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scene: String,
    pub seed: u64,
    pub scene_options: SceneOptions,
    /// Every `holdout_every`-th frame is held out of training; 0 trains on
    /// all frames.
    pub holdout_every: usize,
    pub epochs: u32,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<u64>,
    /// Patches per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub init_epochs: u32,
    pub robust_fraction: f64,
    /// Keep the robust term active after the init phase.
    pub robust_in_full: bool,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    pub disabled: Vec<Toggle>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small grids and MLPs that train a 48x48 scene on one CPU core.
    pub fn desk() -> Self {
        let grid = |dim, base, finest| HashGridConfig {
            levels: 6,
            table_size: 1 << 14,
            features_per_entry: 2,
            base_resolution: base,
            finest_resolution: finest,
            dimensionality: dim,
        };
        TrainConfig {
            scene: "moving-box".into(),
            seed: 0,
            scene_options: SceneOptions::default(),
            holdout_every: 8,
            epochs: 50,
            steps: None,
            batch_size: 1,
            learning_rate: 0.01,
            final_learning_rate: 1e-4,
            init_epochs: 1,
            robust_fraction: 0.75,
            robust_in_full: true,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            field: FieldConfig {
                static_grid: grid(3, 8, 96),
                dynamic_grid: grid(4, 4, 32),
                trunk_width: 32,
                trunk_layers: 1,
                head_width: 16,
                direction_frequencies: 4,
                num_classes: 4,
            },
            sampling: SamplingConfig { coarse: 24, fine: 12, jitter: true },
            disabled: Vec::new(),
        }
    }

    /// Architecture and schedule at full scale.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 200,
            field: FieldConfig::default(),
            sampling: SamplingConfig::default(),
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !SCENE_NAMES.contains(&self.scene.as_str()) {
            return Err(Error::Config(format!(
                "unknown scene `{}` (expected one of {})",
                self.scene,
                SCENE_NAMES.join(", ")
            )));
        }
        self.field.validate()?;
        self.sampling.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > self.final_learning_rate && self.final_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must satisfy initial > final > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.robust_fraction) {
            return Err(Error::Config("robust fraction must lie in [0, 1]".into()));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(Error::Config("a run needs at least one step".into()));
        }
        if self.scene_options.frames < 2 {
            return Err(Error::Config("scenes need at least two frames".into()));
        }
        Ok(())
    }

    pub fn is_disabled(&self, toggle: Toggle) -> bool {
        self.disabled.contains(&toggle)
    }

    /// Training frames of a scene with `frames` frames.
    pub fn train_frames(&self, frames: usize) -> Vec<usize> {
        (0..frames).filter(|&i| self.holdout_every == 0 || i % self.holdout_every != 0).collect()
    }

    /// Held-out frames; empty when nothing is held out.
    pub fn holdout_frames(&self, frames: usize) -> Vec<usize> {
        if self.holdout_every == 0 {
            return Vec::new();
        }
        (0..frames).filter(|&i| i % self.holdout_every == 0).collect()
    }

    /// Effective init-phase length in epochs.
    pub fn effective_init_epochs(&self) -> u32 {
        if self.is_disabled(Toggle::Robust) {
            0
        } else {
            self.init_epochs
        }
    }

    /// Terms optimized in `phase`.
    pub fn active_terms(&self, phase: Phase) -> Vec<Term> {
        let mut terms = phase.default_terms();
        let off = |t: Term| match t {
            Term::Depth => self.is_disabled(Toggle::Depth),
            Term::Semantic => self.is_disabled(Toggle::Sem),
            Term::Road => self.is_disabled(Toggle::Road),
            Term::SigmaD => self.is_disabled(Toggle::SigmaD),
            Term::Robust => {
                self.is_disabled(Toggle::Robust) || (phase == Phase::Full && !self.robust_in_full)
            }
            _ => false,
        };
        terms.retain(|t| !off(*t));
        terms
    }

    pub fn generate_scene(&self) -> Result<SyntheticScene> {
        generate_scene_with(&self.scene, self.seed, &self.scene_options)
    }

    pub fn foreground_mask(&self, scene: &SyntheticScene) -> Result<Option<ClassTableMask>> {
        if self.is_disabled(Toggle::Fgmask) {
            Ok(None)
        } else {
            ClassTableMask::new(scene.class_table.movable()).map(Some)
        }
    }
}

/// Steps in one pass over all patch positions, in expectation.
pub fn steps_per_epoch(num_pixels: usize, batch_size: usize) -> u64 {
    let per_step = PATCH_SIZE * PATCH_SIZE * batch_size;
    num_pixels.div_ceil(per_step).max(1) as u64
}

/// Exponential decay from `lr0` at step 0 to `lr_final` at `total_steps`.
pub fn lr_at(step: u64, total_steps: u64, lr0: f64, lr_final: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * (lr_final / lr0).powf(step as f64 / total_steps as f64)
}

/// One bias-corrected Adam update; `t` counts updates starting at 1.
pub fn adam_step(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + cfg.epsilon);
    }
}

/// Adam moments per parameter block, with a per-block update counter so
/// that blocks frozen during the init phase start their bias correction
/// fresh.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub updates: Vec<u64>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let sizes: Vec<usize> = model.blocks().iter().map(|b| b.len()).collect();
        OptimizerState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            updates: vec![0; sizes.len()],
        }
    }
}

/// Saved state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub params: Vec<Vec<f64>>,
    pub optimizer: OptimizerState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format { path: self.path.to_path_buf(), reason: reason.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.bytes.len() - self.pos) / 8 {
            return self.fail(format!("truncated block of {n} values"));
        }
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    /// Little-endian layout: magic, version, step, config JSON, then for
    /// each block its name, parameters, first and second moments and
    /// update count.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, self.version);
        put_u64(&mut out, self.step);
        let config = serde_json::to_vec(&self.config)?;
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(&config);
        put_u32(&mut out, self.params.len() as u32);
        for (i, p) in self.params.iter().enumerate() {
            let name = BLOCK_NAMES[i].as_bytes();
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name);
            put_f64s(&mut out, p);
            put_f64s(&mut out, &self.optimizer.m[i]);
            put_f64s(&mut out, &self.optimizer.v[i]);
            put_u64(&mut out, self.optimizer.updates[i]);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return r.fail("bad magic (expected DUOC)");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})"));
        }
        let step = r.u64()?;
        let len = r.u64()? as usize;
        if len > bytes.len() {
            return r.fail("truncated config");
        }
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)?;
        let blocks = r.u32()? as usize;
        if blocks != BLOCK_NAMES.len() {
            return r.fail(format!("expected {} parameter blocks, found {blocks}", BLOCK_NAMES.len()));
        }
        let mut params = Vec::with_capacity(blocks);
        let mut opt = OptimizerState { m: Vec::new(), v: Vec::new(), updates: Vec::new() };
        for name in BLOCK_NAMES {
            let n = r.u32()? as usize;
            if r.take(n)? != name.as_bytes() {
                return r.fail(format!("expected block `{name}`"));
            }
            let p = r.f64s()?;
            let m = r.f64s()?;
            let v = r.f64s()?;
            if m.len() != p.len() || v.len() != p.len() {
                return r.fail(format!("moment sizes of `{name}` differ from its parameters"));
            }
            params.push(p);
            opt.m.push(m);
            opt.v.push(v);
            opt.updates.push(r.u64()?);
        }
        if r.pos != bytes.len() {
            return r.fail("trailing bytes");
        }
        Ok(Checkpoint { version, step, config, params, optimizer: opt })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let scene = self.config.generate_scene()?;
        let mut model = build_model(&self.config, &scene)?;
        for (dst, src) in model.blocks_mut().into_iter().zip(&self.params) {
            if dst.len() != src.len() {
                return Err(Error::Config("checkpoint blocks do not match the configured architecture".into()));
            }
            dst.copy_from_slice(src);
        }
        Ok(model)
    }
}

fn build_model(config: &TrainConfig, scene: &SyntheticScene) -> Result<Model> {
    let mut field = config.field.clone();
    field.num_classes = scene.num_classes();
    Model::new(&field, scene.bounds, scene.num_frames(), config.foreground_mask(scene)?, config.seed)
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    pub report: LossReport,
    /// Fraction of rays kept by the trimmed kernel, when it ran.
    pub inlier_fraction: Option<f64>,
    pub max_dynamic_grad: f64,
}

impl StepRecord {
    /// Compact JSON line: step, phase, lr, per-term values, total.
    pub fn to_json_line(&self) -> String {
        let mut terms = serde_json::Map::new();
        for (t, v) in &self.report.terms {
            terms.insert(t.name().into(), serde_json::json!(v));
        }
        serde_json::json!({
            "step": self.step,
            "phase": self.phase.name(),
            "lr": self.lr,
            "terms": terms,
            "total": self.report.total,
            "inlier_fraction": self.inlier_fraction,
        })
        .to_string()
    }
}

/// A training run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub data: Dataset,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub step: u64,
    total_steps: u64,
    init_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let scene = config.generate_scene()?;
        let model = build_model(&config, &scene)?;
        let optimizer = OptimizerState::new(&model);
        Trainer::assemble(config, scene, model, optimizer, 0)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        let model = ckpt.model()?;
        let scene = ckpt.config.generate_scene()?;
        Trainer::assemble(ckpt.config.clone(), scene, model, ckpt.optimizer.clone(), ckpt.step)
    }

    fn assemble(config: TrainConfig, scene: SyntheticScene, model: Model, optimizer: OptimizerState, step: u64) -> Result<Self> {
        let frames = config.train_frames(scene.num_frames());
        if frames.is_empty() {
            return Err(Error::Config("no training frames remain after the holdout split".into()));
        }
        let data = Dataset::new(scene, frames)?;
        let per_epoch = steps_per_epoch(data.num_pixels(), config.batch_size);
        let total_steps = config.steps.unwrap_or(per_epoch * config.epochs as u64);
        let init_steps = (per_epoch * config.effective_init_epochs() as u64).min(total_steps);
        Ok(Trainer { config, data, model, optimizer, step, total_steps, init_steps })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn init_steps(&self) -> u64 {
        self.init_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.init_steps {
            Phase::Init
        } else {
            Phase::Full
        }
    }

    /// Runs one optimization step.
    pub fn step_once(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let phase = self.phase_at(step);
        let mut sampler = rng::stream(self.config.seed, Substream::Sampler, step);
        let patches = self.data.sample_patches(self.config.batch_size, &mut sampler)?;
        let batch = StepBatch::from_patches(&patches)?;
        let mut jitter = rng::stream(self.config.seed, Substream::Jitter, step);
        let samples = place_samples(&self.model, &batch.rays, &self.config.sampling, phase == Phase::Full, Some(&mut jitter))?;
        let opts = StepOptions {
            phase,
            terms: self.config.active_terms(phase),
            weights: self.config.weights.clone(),
            robust_fraction: self.config.robust_fraction,
            fixed_irls: None,
            compute_grads: true,
        };
        let result = forward_backward(&self.model, &batch, &samples, &opts)?;
        if let Some(term) = first_non_finite(&result.report) {
            return Err(Error::NonFinite { term: term.name(), step });
        }
        if !result.report.total.is_finite() {
            return Err(Error::NonFinite { term: "total", step });
        }
        let grads = result.grads.expect("gradients were requested");
        let lr = lr_at(step, self.total_steps, self.config.learning_rate, self.config.final_learning_rate);
        let trainable = if phase == Phase::Init { STATIC_BLOCKS } else { BLOCK_NAMES.len() };
        let grad_blocks = grads.blocks();
        for (i, params) in self.model.blocks_mut().into_iter().enumerate().take(trainable) {
            self.optimizer.updates[i] += 1;
            adam_step(
                params,
                grad_blocks[i],
                &mut self.optimizer.m[i],
                &mut self.optimizer.v[i],
                self.optimizer.updates[i],
                lr,
                &self.config.adam,
            );
        }
        self.step += 1;
        Ok(StepRecord {
            step,
            phase,
            lr,
            report: result.report,
            inlier_fraction: result.irls.map(|m| m.inlier_fraction()),
            max_dynamic_grad: grads.max_abs_dynamic(),
        })
    }

    /// Steps until `stop` (exclusive) or the end of the run, calling
    /// `on_step` after each step.
    pub fn run_until(&mut self, stop: u64, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.step < stop.min(self.total_steps) {
            let rec = self.step_once()?;
            on_step(&rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.model.blocks().iter().map(|b| b.to_vec()).collect(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Trains to completion, appending one JSON line per step to `log` when
/// given.
pub fn train(config: TrainConfig, log: Option<&Path>) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config)?;
    let mut writer = match log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    trainer.run_until(u64::MAX, |rec| {
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", rec.to_json_line())?;
        }
        Ok(())
    })?;
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(trainer.checkpoint())
}
