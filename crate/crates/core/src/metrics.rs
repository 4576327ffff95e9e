//! Image quality and motion-segmentation scores.
//!
//! Aggregates over frames are plain means of per-frame values taken in
//! ascending frame order; motion scores pool true/false positive counts
//! over all evaluated frames before dividing.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_json;
use crate::model::Model;
use crate::pipeline::{render_frame, FrameRender};
use crate::render::render_motion_mask;
use crate::scene::{GroundTruth, SyntheticScene};
use crate::train::{Checkpoint, TrainConfig};

/// Stand-in for an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn mean_sq_error(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::Argument("images and mask must have the same size".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let e = pred[i][c] - gt[i][c];
            sum += e * e;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument("empty pixel mask".into()));
    }
    Ok(sum / (3 * n) as f64)
}

/// `10 log10(1 / MSE)` over masked pixels, capped at [`PSNR_CAP`].
pub fn psnr(pred: &[[f64; 3]], gt: &[[f64; 3]], mask: Option<&[bool]>) -> Result<f64> {
    let mse = mean_sq_error(pred, gt, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM of two equally sized sample sets with uniform weights.
pub fn ssim_uniform(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Mean SSIM over all 8x8 windows lying entirely inside the mask, averaged
/// over color channels.
pub fn ssim(pred: &[[f64; 3]], gt: &[[f64; 3]], width: usize, height: usize, mask: Option<&[bool]>) -> Result<f64> {
    if pred.len() != width * height || gt.len() != width * height || mask.is_some_and(|m| m.len() != width * height) {
        return Err(Error::Argument("images and mask must match the stated size".into()));
    }
    let win = SSIM_WINDOW;
    let mut total = 0.0;
    let mut windows = 0usize;
    let mut xs = vec![0.0; win * win];
    let mut ys = vec![0.0; win * win];
    for r0 in 0..=height.saturating_sub(win) {
        for c0 in 0..=width.saturating_sub(win) {
            if height < win || width < win {
                break;
            }
            let inside = mask.is_none_or(|m| (r0..r0 + win).all(|r| (c0..c0 + win).all(|c| m[r * width + c])));
            if !inside {
                continue;
            }
            let mut s = 0.0;
            for ch in 0..3 {
                for r in 0..win {
                    for c in 0..win {
                        let k = (r0 + r) * width + c0 + c;
                        xs[r * win + c] = pred[k][ch];
                        ys[r * win + c] = gt[k][ch];
                    }
                }
                s += ssim_uniform(&xs, &ys);
            }
            total += s / 3.0;
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(Error::Argument("no 8x8 window lies inside the mask".into()));
    }
    Ok(total / windows as f64)
}

/// Confusion counts of a predicted mask against ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MaskCounts {
    pub fn of(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = MaskCounts::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    pub fn add(self, o: MaskCounts) -> Self {
        MaskCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }

    /// Recall, IoU and F1. With no ground-truth positives recall is 1; IoU
    /// and F1 are 1 when the prediction is also empty and 0 otherwise.
    pub fn scores(self) -> MotionScores {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp + self.fn_ == 0 {
            let hit = if self.fp == 0 { 1.0 } else { 0.0 };
            return MotionScores { recall: 1.0, iou: hit, f1: hit };
        }
        MotionScores { recall: tp / (tp + fn_), iou: tp / (tp + fp + fn_), f1: 2.0 * tp / (2.0 * tp + fp + fn_) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionScores {
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
}

pub fn motion_metrics(pred: &[bool], gt: &[bool]) -> Result<MotionScores> {
    if pred.len() != gt.len() {
        return Err(Error::Argument("masks must have the same size".into()));
    }
    Ok(MaskCounts::of(pred, gt).scores())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train, holdout or all)"))),
        }
    }

    pub fn frames(self, config: &TrainConfig, num_frames: usize) -> Vec<usize> {
        match self {
            Split::Train => config.train_frames(num_frames),
            Split::Holdout => config.holdout_frames(num_frames),
            Split::All => (0..num_frames).collect(),
        }
    }
}

/// Appearance row used to render `frame`: its own row when it was trained
/// on, otherwise the nearest training frame's (earlier one on ties).
pub fn appearance_row(frame: usize, train_frames: &[usize]) -> usize {
    if train_frames.contains(&frame) {
        return frame;
    }
    train_frames.iter().copied().min_by_key(|&f| (f.abs_diff(frame), f)).unwrap_or(frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub appearance_row: usize,
    pub psnr_composed: f64,
    pub ssim_composed: f64,
    pub psnr_static_masked: f64,
    /// `None` when no SSIM window avoids the motion mask.
    pub ssim_static_masked: Option<f64>,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub dynamic_opacity_mean: f64,
    pub counts: MaskCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scene: String,
    pub split: Split,
    pub threshold: f64,
    pub psnr_composed: f64,
    pub ssim_composed: f64,
    pub psnr_static_masked: f64,
    pub ssim_static_masked: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    pub dynamic_opacity_mean: f64,
    pub frames: Vec<FrameMetrics>,
    pub notes: Vec<String>,
}

/// Column order of [`MetricsReport::to_csv`].
pub const CSV_COLUMNS: [&str; 11] = [
    "frame",
    "psnr_composed",
    "ssim_composed",
    "psnr_static_masked",
    "ssim_static_masked",
    "recall",
    "iou",
    "f1",
    "dynamic_opacity_mean",
    "tp",
    "fp_fn",
];

fn num(v: f64) -> String {
    format!("{v:.9}")
}

impl MetricsReport {
    /// One row per frame followed by an `all` row with the aggregates. The
    /// last column holds `fp+fn`.
    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for f in &self.frames {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                f.frame,
                num(f.psnr_composed),
                num(f.ssim_composed),
                num(f.psnr_static_masked),
                f.ssim_static_masked.map(num).unwrap_or_default(),
                num(f.recall),
                num(f.iou),
                num(f.f1),
                num(f.dynamic_opacity_mean),
                f.counts.tp,
                f.counts.fp + f.counts.fn_,
            );
        }
        let total = self.frames.iter().fold(MaskCounts::default(), |a, f| a.add(f.counts));
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{},{},{},{},{}",
            num(self.psnr_composed),
            num(self.ssim_composed),
            num(self.psnr_static_masked),
            num(self.ssim_static_masked),
            num(self.recall),
            num(self.iou),
            num(self.f1),
            num(self.dynamic_opacity_mean),
            total.tp,
            total.fp + total.fn_,
        );
        s
    }

    /// Writes `metrics.json` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), self)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv())?;
        Ok(())
    }
}

/// Scores one rendered frame against its ground truth.
pub fn frame_metrics(render: &FrameRender, gt: &GroundTruth, row: usize, threshold: f64) -> Result<FrameMetrics> {
    let (w, h) = (gt.width, gt.height);
    let keep: Vec<bool> = gt.motion.iter().map(|m| !m).collect();
    let pred = render_motion_mask(&render.dynamic_opacity, threshold);
    let counts = MaskCounts::of(&pred, &gt.motion);
    let scores = counts.scores();
    let ssim_static = match ssim(&render.static_color, &gt.color, w, h, Some(&keep)) {
        Ok(v) => Some(v),
        Err(Error::Argument(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(FrameMetrics {
        frame: render.frame,
        appearance_row: row,
        psnr_composed: psnr(&render.composed, &gt.color, None)?,
        ssim_composed: ssim(&render.composed, &gt.color, w, h, None)?,
        psnr_static_masked: psnr(&render.static_color, &gt.color, Some(&keep))?,
        ssim_static_masked: ssim_static,
        recall: scores.recall,
        iou: scores.iou,
        f1: scores.f1,
        dynamic_opacity_mean: render.dynamic_opacity.iter().sum::<f64>() / render.dynamic_opacity.len() as f64,
        counts,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Aggregates per-frame metrics; the result does not depend on the order of
/// `frames`.
pub fn aggregate(scene: &str, split: Split, threshold: f64, mut frames: Vec<FrameMetrics>) -> Result<MetricsReport> {
    if frames.is_empty() {
        return Err(Error::Argument(format!("the {} split is empty", split.name())));
    }
    frames.sort_by_key(|f| f.frame);
    let counts = frames.iter().fold(MaskCounts::default(), |a, f| a.add(f.counts));
    let scores = counts.scores();
    let ssim_frames: Vec<f64> = frames.iter().filter_map(|f| f.ssim_static_masked).collect();
    if ssim_frames.is_empty() {
        return Err(Error::Argument("no SSIM window avoids the motion mask in any frame".into()));
    }
    Ok(MetricsReport {
        scene: scene.into(),
        split,
        threshold,
        psnr_composed: mean(frames.iter().map(|f| f.psnr_composed)),
        ssim_composed: mean(frames.iter().map(|f| f.ssim_composed)),
        psnr_static_masked: mean(frames.iter().map(|f| f.psnr_static_masked)),
        ssim_static_masked: mean(ssim_frames.into_iter()),
        recall: scores.recall,
        iou: scores.iou,
        f1: scores.f1,
        dynamic_opacity_mean: mean(frames.iter().map(|f| f.dynamic_opacity_mean)),
        notes: vec![
            "static metrics exclude ground-truth motion pixels, which include cast shadows".into(),
            "held-out frames use the appearance row of the nearest training frame".into(),
            "motion scores pool counts over frames; image scores average per-frame values".into(),
        ],
        frames,
    })
}

/// Renders and scores every frame of `split`.
pub fn evaluate_model(
    model: &Model,
    config: &TrainConfig,
    scene: &SyntheticScene,
    split: Split,
    threshold: f64,
) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("motion threshold {threshold} must lie in (0, 1)")));
    }
    let train = config.train_frames(scene.num_frames());
    let frames = split.frames(config, scene.num_frames());
    if frames.is_empty() {
        return Err(Error::Argument(format!("the {} split is empty", split.name())));
    }
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let row = appearance_row(frame, &train);
        let render = render_frame(model, scene, frame, row, &config.sampling)?;
        let gt = scene.rasterize_ground_truth(frame)?;
        out.push(frame_metrics(&render, &gt, row, threshold)?);
    }
    aggregate(&scene.name, split, threshold, out)
}

/// Evaluates a checkpoint on the scene it was trained on.
pub fn evaluate(ckpt: &Checkpoint, split: Split, threshold: f64) -> Result<MetricsReport> {
    let scene = ckpt.config.generate_scene()?;
    let model = ckpt.model()?;
    evaluate_model(&model, &ckpt.config, &scene, split, threshold)
}
