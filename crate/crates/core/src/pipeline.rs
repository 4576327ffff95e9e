//! Batched forward and backward passes over a batch of patches.
//!
//! A step runs in three stages: place samples along every ray
//! ([`place_samples`]), evaluate both branches over all samples at once and
//! composite ray by ray, then evaluate the selected loss terms and push their
//! gradients back through compositing into the fields ([`forward_backward`]).

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BranchBatch, BranchBatchGrad};
use crate::loss::{
    irls_weights, loss_depth, loss_dynamic_sparsity, loss_entropy, loss_road, loss_robust, loss_rgb, loss_semantic,
    loss_sky, loss_total, IrlsWeightMap, LossReport, LossWeights, Phase, SparsityRay, Term,
};
use crate::model::{Model, ModelGrads};
use crate::render::{
    composite, composite_backward, merge_samples, ray_bounds, sample_pdf, sample_uniform, BranchView, BundleGrad,
    RaySamples, RenderBundle, SampleGrad, Strategy,
};
use crate::scene::{generate_frame_ray, Patch, Ray, SyntheticScene, Vec3};

/// How samples are placed along rays.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub coarse: usize,
    /// Zero disables the second, importance-sampled pass.
    pub fine: usize,
    pub jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { coarse: 32, fine: 16, jitter: true }
    }
}

impl SamplingConfig {
    pub fn strategy(&self) -> Strategy {
        if self.fine == 0 {
            Strategy::Uniform { samples: self.coarse }
        } else {
            Strategy::Hierarchical { coarse: self.coarse, fine: self.fine }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse < 2 {
            return Err(Error::Config("at least two coarse samples per ray are required".into()));
        }
        Ok(())
    }
}

/// Rays of a patch batch with their ground truth, patch-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StepBatch {
    pub patch_size: usize,
    pub rays: Vec<Ray>,
    pub appearance_rows: Vec<usize>,
    pub color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub semantics: Vec<usize>,
    pub sky: Vec<bool>,
    pub road: Vec<bool>,
    pub motion: Vec<bool>,
}

impl StepBatch {
    /// Flattens equally sized patches; the appearance row of a ray is its
    /// frame index.
    pub fn from_patches(patches: &[Patch]) -> Result<Self> {
        let size = patches
            .first()
            .ok_or_else(|| Error::Argument("empty patch batch".into()))?
            .size;
        let mut b = StepBatch {
            patch_size: size,
            rays: Vec::new(),
            appearance_rows: Vec::new(),
            color: Vec::new(),
            depth: Vec::new(),
            semantics: Vec::new(),
            sky: Vec::new(),
            road: Vec::new(),
            motion: Vec::new(),
        };
        for p in patches {
            if p.size != size {
                return Err(Error::Argument("patches in one batch must share a size".into()));
            }
            b.rays.extend(p.rays.iter().cloned());
            b.appearance_rows.extend(std::iter::repeat_n(p.frame_index, p.rays.len()));
            b.color.extend_from_slice(&p.ground_truth_color);
            b.depth.extend_from_slice(&p.ground_truth_depth);
            b.semantics.extend_from_slice(&p.ground_truth_semantics);
            b.sky.extend_from_slice(&p.sky_mask);
            b.road.extend_from_slice(&p.road_mask);
            b.motion.extend_from_slice(&p.motion_mask);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn num_patches(&self) -> usize {
        self.rays.len() / (self.patch_size * self.patch_size)
    }
}

/// All samples of a ray batch flattened into matrices.
struct Gathered {
    offsets: Vec<usize>,
    points: Array2<f64>,
    directions: Array2<f64>,
    rows: Vec<usize>,
    times: Vec<f64>,
}

fn gather(rays: &[Ray], rows: &[usize], samples: &[RaySamples]) -> Gathered {
    let n: usize = samples.iter().map(|s| s.len()).sum();
    let mut g = Gathered {
        offsets: Vec::with_capacity(samples.len() + 1),
        points: Array2::zeros((n, 3)),
        directions: Array2::zeros((n, 3)),
        rows: Vec::with_capacity(n),
        times: Vec::with_capacity(n),
    };
    let mut k = 0;
    g.offsets.push(0);
    for ((ray, &row), s) in rays.iter().zip(rows).zip(samples) {
        for p in &s.positions {
            for a in 0..3 {
                g.points[[k, a]] = p[a];
                g.directions[[k, a]] = ray.direction[a];
            }
            g.rows.push(row);
            g.times.push(ray.timestamp);
            k += 1;
        }
        g.offsets.push(k);
    }
    g
}

fn sample_interval(model: &Model, ray: &Ray) -> Result<(f64, f64)> {
    ray_bounds(ray, &model.static_field.bounds)
        .ok_or_else(|| Error::Argument(format!("ray of pixel {:?} misses the scene bounds", ray.pixel)))
}

/// Places samples along every ray. The hierarchical strategy evaluates the
/// densities of the coarse pass (dynamic branch only when
/// `include_dynamic`) and draws the fine samples from its weights. Jitter,
/// when enabled, consumes `rng` in ray order, coarse pass first.
pub fn place_samples(
    model: &Model,
    rays: &[Ray],
    sampling: &SamplingConfig,
    include_dynamic: bool,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<RaySamples>> {
    let intervals: Vec<(f64, f64)> = rays.iter().map(|r| sample_interval(model, r)).collect::<Result<_>>()?;
    let mut coarse = Vec::with_capacity(rays.len());
    for (ray, &(near, far)) in rays.iter().zip(&intervals) {
        let t = match (sampling.jitter, rng.as_mut()) {
            (true, Some(r)) => sample_uniform(near, far, sampling.coarse, Some(&mut **r)),
            _ => sample_uniform(near, far, sampling.coarse, None),
        };
        coarse.push(RaySamples::new(ray, t, far));
    }
    if sampling.fine == 0 {
        return Ok(coarse);
    }
    let rows = vec![0; rays.len()];
    let g = gather(rays, &rows, &coarse);
    let sigma_s = model.static_field.sigma_batch(g.points.view());
    let sigma_d = if include_dynamic {
        model.dynamic_field.sigma_batch(g.points.view(), &g.times)
    } else {
        vec![0.0; sigma_s.len()]
    };
    let mut out = Vec::with_capacity(rays.len());
    for (i, (ray, &(near, far))) in rays.iter().zip(&intervals).enumerate() {
        let s = &coarse[i];
        let range = g.offsets[i]..g.offsets[i + 1];
        let mut weights = Vec::with_capacity(s.len());
        let mut optical = 0.0f64;
        for (j, k) in range.enumerate() {
            let tau = (sigma_s[k] + sigma_d[k]) * s.deltas[j];
            let t = (-optical).exp();
            let a_s = -(-sigma_s[k] * s.deltas[j]).exp_m1();
            let a_d = -(-sigma_d[k] * s.deltas[j]).exp_m1();
            weights.push(t * (a_s + a_d));
            optical += tau;
        }
        let fine = match (sampling.jitter, rng.as_mut()) {
            (true, Some(r)) => sample_pdf(near, far, &weights, sampling.fine, Some(&mut **r)),
            _ => sample_pdf(near, far, &weights, sampling.fine, None),
        };
        out.push(RaySamples::new(ray, merge_samples(&s.t_values, &fine, near, far), far));
    }
    Ok(out)
}

/// Branch outputs over all samples of a ray batch.
struct Evaluated {
    offsets: Vec<usize>,
    static_out: BranchBatch,
    dynamic_out: BranchBatch,
    bundles: Vec<RenderBundle>,
}

fn empty_dynamic(n: usize, classes: usize) -> BranchBatch {
    BranchBatch {
        sigma: vec![0.0; n],
        color: Array2::zeros((n, 3)),
        logits: Array2::zeros((n, classes)),
        probs: Array2::zeros((n, classes)),
        shadow: vec![0.0; n],
    }
}

/// Renders rays without keeping backward state. With `include_dynamic`
/// false the dynamic branch is treated as empty space.
pub fn render_rays(
    model: &Model,
    rays: &[Ray],
    rows: &[usize],
    samples: &[RaySamples],
    include_dynamic: bool,
) -> Vec<RenderBundle> {
    let g = gather(rays, rows, samples);
    let (static_out, _) = model.static_field.forward_batch(g.points.view(), g.directions.view(), &g.rows);
    let dynamic_out = if include_dynamic {
        model.dynamic_field.forward_batch(g.points.view(), g.directions.view(), &g.times).0
    } else {
        empty_dynamic(g.rows.len(), model.config.num_classes)
    };
    (0..rays.len())
        .map(|i| {
            let r = g.offsets[i]..g.offsets[i + 1];
            composite(&samples[i], BranchView::of(&static_out, r.clone()), BranchView::of(&dynamic_out, r))
        })
        .collect()
}

/// Rays rendered per chunk by [`render_frame`].
pub const RENDER_CHUNK: usize = 1024;

/// Every per-pixel quantity of one rendered frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRender {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub composed: Vec<[f64; 3]>,
    pub static_color: Vec<[f64; 3]>,
    /// Premultiplied by the dynamic opacity.
    pub dynamic_color: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub static_depth: Vec<f64>,
    pub semantics: Vec<usize>,
    pub static_semantics: Vec<usize>,
    pub dynamic_opacity: Vec<f64>,
    pub shadow: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Renders a full frame with unjittered samples, using appearance row
/// `row` for the static branch.
pub fn render_frame(
    model: &Model,
    scene: &SyntheticScene,
    frame: usize,
    row: usize,
    sampling: &SamplingConfig,
) -> Result<FrameRender> {
    let cam = scene
        .cameras
        .get(frame)
        .ok_or_else(|| Error::Argument(format!("frame {frame} out of range (scene has {})", scene.num_frames())))?;
    let (w, h) = (cam.width, cam.height);
    let mut rays = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            rays.push(generate_frame_ray(cam, r, c, scene.timestamp(frame), frame)?);
        }
    }
    let unjittered = SamplingConfig { jitter: false, ..*sampling };
    let mut out = FrameRender {
        frame,
        width: w,
        height: h,
        composed: Vec::with_capacity(w * h),
        static_color: Vec::with_capacity(w * h),
        dynamic_color: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        static_depth: Vec::with_capacity(w * h),
        semantics: Vec::with_capacity(w * h),
        static_semantics: Vec::with_capacity(w * h),
        dynamic_opacity: Vec::with_capacity(w * h),
        shadow: Vec::with_capacity(w * h),
    };
    for chunk in rays.chunks(RENDER_CHUNK) {
        let samples = place_samples(model, chunk, &unjittered, true, None)?;
        let rows = vec![row; chunk.len()];
        for b in render_rays(model, chunk, &rows, &samples, true) {
            out.composed.push(b.composed_color);
            out.static_color.push(b.static_color);
            out.dynamic_color.push(b.dynamic_color);
            out.depth.push(b.depth);
            out.static_depth.push(b.static_depth);
            out.semantics.push(argmax(&b.semantics));
            out.static_semantics.push(argmax(&b.static_semantics));
            out.dynamic_opacity.push(b.dynamic_opacity);
            out.shadow.push(b.shadow_map);
        }
    }
    Ok(out)
}

/// What a step computes.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOptions {
    pub phase: Phase,
    pub terms: Vec<Term>,
    pub weights: LossWeights,
    pub robust_fraction: f64,
    /// Use these inlier weights instead of computing them from the batch.
    pub fixed_irls: Option<Vec<f64>>,
    pub compute_grads: bool,
}

impl StepOptions {
    pub fn new(phase: Phase, weights: LossWeights) -> Self {
        StepOptions {
            phase,
            terms: phase.default_terms(),
            weights,
            robust_fraction: 0.75,
            fixed_irls: None,
            compute_grads: true,
        }
    }
}

/// Result of [`forward_backward`].
#[derive(Debug, Clone)]
pub struct StepResult {
    pub report: LossReport,
    pub grads: Option<ModelGrads>,
    pub irls: Option<IrlsWeightMap>,
    pub bundles: Vec<RenderBundle>,
}

fn add3(a: &mut [f64; 3], b: [f64; 3], w: f64) {
    for c in 0..3 {
        a[c] += w * b[c];
    }
}

fn add_into(a: &mut [f64], b: &[f64], w: f64) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += w * y;
    }
}

/// Evaluates the selected loss terms on `batch` with the given samples and,
/// if requested, their exact gradient with respect to every parameter.
/// In the init phase the dynamic branch is neither evaluated nor rendered.
pub fn forward_backward(model: &Model, batch: &StepBatch, samples: &[RaySamples], opts: &StepOptions) -> Result<StepResult> {
    if batch.is_empty() {
        return Err(Error::Argument("empty ray batch".into()));
    }
    let include_dynamic = opts.phase == Phase::Full;
    let classes = model.config.num_classes;
    let n_rays = batch.len();
    let g = gather(&batch.rays, &batch.appearance_rows, samples);
    let (static_out, static_trace) = model.static_field.forward_batch(g.points.view(), g.directions.view(), &g.rows);
    let (dynamic_out, dynamic_trace) = if include_dynamic {
        let (o, t) = model.dynamic_field.forward_batch(g.points.view(), g.directions.view(), &g.times);
        (o, Some(t))
    } else {
        (empty_dynamic(g.rows.len(), classes), None)
    };
    let ev = Evaluated {
        bundles: (0..n_rays)
            .map(|i| {
                let r = g.offsets[i]..g.offsets[i + 1];
                composite(&samples[i], BranchView::of(&static_out, r.clone()), BranchView::of(&dynamic_out, r))
            })
            .collect(),
        offsets: g.offsets,
        static_out,
        dynamic_out,
    };

    let mut ups: Vec<BundleGrad> = (0..n_rays).map(|_| BundleGrad::zeros(classes)).collect();
    let mut directs: Vec<SampleGrad> = samples.iter().map(|s| SampleGrad::zeros(s.len())).collect();
    let mut values = Vec::new();
    let mut irls = None;
    let bundles = &ev.bundles;
    let pp = batch.patch_size * batch.patch_size;

    for &term in &Term::ALL {
        if !opts.terms.contains(&term) {
            continue;
        }
        let w = term.weight(&opts.weights);
        let value = match term {
            Term::Rgb => {
                let pred: Vec<[f64; 3]> = bundles.iter().map(|b| b.composed_color).collect();
                let (v, gr) = loss_rgb(&pred, &batch.color, pp, opts.weights.dssim_weight);
                for (u, gi) in ups.iter_mut().zip(gr) {
                    add3(&mut u.composed_color, gi, w);
                }
                v
            }
            Term::Depth => {
                let pred: Vec<f64> = bundles.iter().map(|b| b.depth).collect();
                let mask: Vec<bool> = batch.sky.iter().map(|s| !s).collect();
                let (v, gr) = loss_depth(&pred, &batch.depth, &mask);
                for (u, gi) in ups.iter_mut().zip(gr) {
                    u.depth += w * gi;
                }
                v
            }
            Term::Semantic => {
                let pred: Vec<Vec<f64>> = bundles.iter().map(|b| b.semantics.clone()).collect();
                let (v, gr) = loss_semantic(&pred, &batch.semantics);
                for (u, gi) in ups.iter_mut().zip(gr) {
                    add_into(&mut u.semantics, &gi, w);
                }
                v
            }
            Term::Robust => {
                let pred: Vec<[f64; 3]> = bundles.iter().map(|b| b.static_color).collect();
                let map = match &opts.fixed_irls {
                    Some(fixed) => {
                        if fixed.len() != n_rays {
                            return Err(Error::Argument("fixed inlier weights do not match the batch".into()));
                        }
                        IrlsWeightMap {
                            residuals: residuals(&pred, &batch.color),
                            threshold: f64::NAN,
                            raw: fixed.iter().map(|v| *v > 0.0).collect(),
                            weights: fixed.clone(),
                        }
                    }
                    None => irls_weights(&residuals(&pred, &batch.color), opts.robust_fraction, batch.patch_size)?,
                };
                let (v, gr) = loss_robust(&pred, &batch.color, &map.weights);
                for (u, gi) in ups.iter_mut().zip(gr) {
                    add3(&mut u.static_color, gi, w);
                }
                irls = Some(map);
                v
            }
            Term::Sky => {
                let sky_rays: Vec<usize> = (0..n_rays).filter(|&i| batch.sky[i]).collect();
                let sigma: Vec<Vec<f64>> = sky_rays
                    .iter()
                    .map(|&i| {
                        (ev.offsets[i]..ev.offsets[i + 1])
                            .map(|k| ev.static_out.sigma[k] + ev.dynamic_out.sigma[k])
                            .collect()
                    })
                    .collect();
                let (v, gr) = loss_sky(&sigma);
                for (&i, gi) in sky_rays.iter().zip(gr) {
                    add_into(&mut directs[i].sigma_static, &gi, w);
                    if include_dynamic {
                        add_into(&mut directs[i].sigma_dynamic, &gi, w);
                    }
                }
                v
            }
            Term::Road => {
                let mut sets = Vec::new();
                let mut members = Vec::new();
                for p in 0..batch.num_patches() {
                    let idx: Vec<usize> =
                        (p * pp..(p + 1) * pp).filter(|&i| batch.road[i] && bundles[i].depth > 0.0).collect();
                    sets.push(
                        idx.iter()
                            .map(|&i| batch.rays[i].origin + batch.rays[i].direction * bundles[i].depth)
                            .collect::<Vec<Vec3>>(),
                    );
                    members.push(idx);
                }
                let (v, gr) = loss_road(&sets);
                for (idx, gp) in members.iter().zip(gr) {
                    for (&i, gi) in idx.iter().zip(gp) {
                        ups[i].depth += w * gi.dot(&batch.rays[i].direction);
                    }
                }
                v
            }
            Term::SigmaD | Term::Rho => {
                let rays: Vec<SparsityRay<'_>> = (0..n_rays)
                    .map(|i| SparsityRay {
                        sigma_dynamic: &ev.dynamic_out.sigma[ev.offsets[i]..ev.offsets[i + 1]],
                        transmittance: &bundles[i].per_sample.transmittance,
                        alpha_total: &bundles[i].per_sample.alpha_total,
                        rho: &bundles[i].per_sample.rho,
                    })
                    .collect();
                let ((vs, vr), gs, gr) = loss_dynamic_sparsity(&rays);
                if include_dynamic {
                    let grads = if term == Term::SigmaD { gs } else { gr };
                    for (d, gi) in directs.iter_mut().zip(grads) {
                        add_into(&mut d.sigma_dynamic, &gi.sigma_dynamic, w);
                        add_into(&mut d.transmittance, &gi.transmittance, w);
                        add_into(&mut d.alpha_total, &gi.alpha_total, w);
                        add_into(&mut d.rho, &gi.rho, w);
                    }
                }
                if term == Term::SigmaD {
                    vs
                } else {
                    vr
                }
            }
            Term::Entropy => {
                let a_s: Vec<f64> = bundles.iter().flat_map(|b| b.per_sample.alpha_static.iter().copied()).collect();
                let a_d: Vec<f64> = bundles.iter().flat_map(|b| b.per_sample.alpha_dynamic.iter().copied()).collect();
                let (v, gs, gd) = loss_entropy(&a_s, &a_d);
                let mut k = 0;
                for d in directs.iter_mut() {
                    let len = d.alpha_static.len();
                    add_into(&mut d.alpha_static, &gs[k..k + len], w);
                    if include_dynamic {
                        add_into(&mut d.alpha_dynamic, &gd[k..k + len], w);
                    }
                    k += len;
                }
                v
            }
        };
        values.push((term, value));
    }
    let report = loss_total(&values, &opts.weights, opts.phase);

    let grads = if opts.compute_grads {
        let n = ev.static_out.len();
        let mut gs = BranchBatchGrad::zeros(n, classes, false);
        let mut gd = BranchBatchGrad::zeros(n, classes, true);
        for i in 0..n_rays {
            let r = ev.offsets[i]..ev.offsets[i + 1];
            let cg = composite_backward(
                &samples[i],
                BranchView::of(&ev.static_out, r.clone()),
                BranchView::of(&ev.dynamic_out, r.clone()),
                &bundles[i],
                &ups[i],
                &directs[i],
            );
            for (j, k) in r.enumerate() {
                gs.sigma[k] = cg.sigma_static[j];
                gd.sigma[k] = cg.sigma_dynamic[j];
                gd.shadow[k] = cg.rho[j];
                for c in 0..3 {
                    gs.color[[k, c]] = cg.color_static[[j, c]];
                    gd.color[[k, c]] = cg.color_dynamic[[j, c]];
                }
                for l in 0..classes {
                    gs.probs[[k, l]] = cg.probs_static[[j, l]];
                    gd.probs[[k, l]] = cg.probs_dynamic[[j, l]];
                }
            }
        }
        let mut mg = model.zero_grads();
        model
            .static_field
            .backward_batch(&static_trace, &ev.static_out, &gs, &mut mg.static_grads);
        if let Some(trace) = &dynamic_trace {
            model
                .dynamic_field
                .backward_batch(trace, &ev.dynamic_out, &gd, &mut mg.dynamic_grads);
        }
        Some(mg)
    } else {
        None
    };
    Ok(StepResult { report, grads, irls, bundles: ev.bundles })
}

/// Per-ray residual norms `|C^S - C|`.
pub fn residuals(static_color: &[[f64; 3]], gt: &[[f64; 3]]) -> Vec<f64> {
    static_color
        .iter()
        .zip(gt)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .collect()
}
