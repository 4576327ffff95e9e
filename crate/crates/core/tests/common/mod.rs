#![allow(dead_code)]

use duofield::encoding::HashGridConfig;
use duofield::field::{ClassTableMask, FieldConfig};
use duofield::loss::{irls_weights, LossWeights, Phase, Term};
use duofield::model::Model;
use duofield::pipeline::{forward_backward, place_samples, residuals, SamplingConfig, StepBatch, StepOptions};
use duofield::render::RaySamples;
use duofield::scene::{generate_scene_with, Dataset, SceneOptions};

pub fn miniature_config() -> FieldConfig {
    let grid = |dim| HashGridConfig {
        levels: 2,
        table_size: 1 << 6,
        features_per_entry: 2,
        base_resolution: 2,
        finest_resolution: 6,
        dimensionality: dim,
    };
    FieldConfig {
        static_grid: grid(3),
        dynamic_grid: grid(4),
        trunk_width: 8,
        trunk_layers: 1,
        head_width: 8,
        direction_frequencies: 2,
        num_classes: 4,
    }
}

/// A tiny model with a three-patch batch that sees sky, road and the vehicle,
/// fixed deterministic samples and fixed inlier weights.
pub struct Miniature {
    pub model: Model,
    pub batch: StepBatch,
    pub samples: Vec<RaySamples>,
    pub inliers: Vec<f64>,
}

pub fn miniature(seed: u64) -> Miniature {
    let scene = generate_scene_with("moving-box", seed, &SceneOptions { frames: 8, width: 16, height: 16 }).unwrap();
    let mask = ClassTableMask::new(scene.class_table.movable()).unwrap();
    let frames = scene.num_frames();
    let bounds = scene.bounds;
    let data = Dataset::all_frames(scene).unwrap();
    let patches = vec![
        data.patch(3, (0, 0), 3).unwrap(),
        data.patch(3, (13, 6), 3).unwrap(),
        data.patch(4, (8, 7), 3).unwrap(),
    ];
    let batch = StepBatch::from_patches(&patches).unwrap();
    let model = Model::new(&miniature_config(), bounds, frames, Some(mask), seed).unwrap();
    let sampling = SamplingConfig { coarse: 8, fine: 0, jitter: false };
    let samples = place_samples(&model, &batch.rays, &sampling, true, None).unwrap();
    let opts = StepOptions { terms: vec![Term::Robust], ..StepOptions::new(Phase::Full, LossWeights::default()) };
    let out = forward_backward(&model, &batch, &samples, &StepOptions { compute_grads: false, ..opts }).unwrap();
    let pred: Vec<[f64; 3]> = out.bundles.iter().map(|b| b.static_color).collect();
    let inliers = irls_weights(&residuals(&pred, &batch.color), 0.75, batch.patch_size).unwrap().weights;
    Miniature { model, batch, samples, inliers }
}

/// Step options evaluating a single term with the fixed inlier weights.
pub fn single_term(m: &Miniature, term: Term, grads: bool) -> StepOptions {
    StepOptions {
        terms: vec![term],
        fixed_irls: Some(m.inliers.clone()),
        compute_grads: grads,
        ..StepOptions::new(Phase::Full, LossWeights::default())
    }
}

pub struct BlockCheck {
    pub block: &'static str,
    pub checked: usize,
    pub nonzero: usize,
    pub worst: f64,
}

/// Central-difference check of every parameter of every block for one term.
/// `worst` is the largest `|a - n| / max(1e-4 * max(|a|, |n|), 1e-8)`, so a
/// value at most 1 passes.
pub fn check_term(m: &mut Miniature, term: Term, h: f64) -> Vec<BlockCheck> {
    let analytic = forward_backward(&m.model, &m.batch, &m.samples, &single_term(m, term, true))
        .unwrap()
        .grads
        .unwrap();
    let analytic: Vec<Vec<f64>> = analytic.blocks().iter().map(|b| b.to_vec()).collect();
    let opts = single_term(m, term, false);
    let mut out = Vec::new();
    for (b, name) in duofield::model::BLOCK_NAMES.iter().enumerate() {
        let len = m.model.blocks()[b].len();
        let mut worst = 0.0f64;
        let mut nonzero = 0;
        for i in 0..len {
            let orig = m.model.blocks()[b][i];
            m.model.blocks_mut()[b][i] = orig + h;
            let up = forward_backward(&m.model, &m.batch, &m.samples, &opts).unwrap().report.total;
            m.model.blocks_mut()[b][i] = orig - h;
            let down = forward_backward(&m.model, &m.batch, &m.samples, &opts).unwrap().report.total;
            m.model.blocks_mut()[b][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[b][i];
            if a != 0.0 {
                nonzero += 1;
            }
            let tol = (1e-4 * a.abs().max(numeric.abs())).max(1e-8);
            worst = worst.max((a - numeric).abs() / tol);
        }
        out.push(BlockCheck { block: name, checked: len, nonzero, worst });
    }
    out
}
