//! Ray sampling and joint compositing of the static and dynamic branches.
//!
//! Both branches share one transmittance, `T_i = exp(-sum_{j<i} (sigma^S_j +
//! sigma^D_j) delta_j)`. The composed color attenuates static radiance by the
//! shadow ratio: `C = sum T_i (a^S_i (1 - rho_i) c^S_i + a^D_i c^D_i)`, with
//! `a = 1 - exp(-sigma delta)`. Branch-only quantities reuse the joint `T_i`.

use std::ops::Range;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};

use crate::field::{pointwise_softmax, BranchBatch, BranchOutput};
use crate::scene::{Aabb, Ray, Vec3};

/// Distance from the camera before which no samples are placed.
pub const NEAR_PLANE: f64 = 0.05;

/// Default motion-mask threshold on rendered dynamic opacity.
pub const MOTION_THRESHOLD: f64 = 0.5;

/// Sample positions along one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<Vec3>,
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
    pub far: f64,
}

impl RaySamples {
    /// `t_values` must be strictly increasing and below `far`; the last
    /// interval runs to the far plane.
    pub fn new(ray: &Ray, t_values: Vec<f64>, far: f64) -> Self {
        assert!(!t_values.is_empty(), "a ray needs at least one sample");
        assert!(
            t_values.windows(2).all(|w| w[1] > w[0]),
            "sample distances must be strictly increasing"
        );
        let k = t_values.len();
        let mut deltas = Vec::with_capacity(k);
        for i in 0..k - 1 {
            deltas.push(t_values[i + 1] - t_values[i]);
        }
        let last = far - t_values[k - 1];
        deltas.push(if last > 0.0 { last } else { 1e-6 });
        let positions = t_values.iter().map(|&t| ray.origin + ray.direction * t).collect();
        RaySamples { positions, t_values, deltas, far }
    }

    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }
}

/// Sampling-interval of `ray` inside `bounds`: from the near plane to the
/// exit of the box.
pub fn ray_bounds(ray: &Ray, bounds: &Aabb) -> Option<(f64, f64)> {
    let (enter, exit) = bounds.ray_interval(&ray.origin, &ray.direction)?;
    let near = enter.max(NEAR_PLANE);
    (exit > near).then_some((near, exit))
}

/// Stratified samples: one per equal bin, at the bin midpoint unless a
/// jitter source is given.
pub fn sample_uniform(near: f64, far: f64, k: usize, jitter: Option<&mut dyn RngCore>) -> Vec<f64> {
    assert!(k >= 1 && far > near);
    let h = (far - near) / k as f64;
    match jitter {
        None => (0..k).map(|j| near + (j as f64 + 0.5) * h).collect(),
        Some(rng) => (0..k).map(|j| near + (j as f64 + rng.random::<f64>()) * h).collect(),
    }
}

/// Inverse-CDF samples from the piecewise-constant density whose mass on the
/// `j`-th of `weights.len()` equal bins over `[near, far]` is `weights[j]`.
/// All-zero weights fall back to uniform sampling.
pub fn sample_pdf(near: f64, far: f64, weights: &[f64], k: usize, jitter: Option<&mut dyn RngCore>) -> Vec<f64> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if !(total > 1e-12) || !total.is_finite() {
        return sample_uniform(near, far, k, jitter);
    }
    let bins = weights.len();
    let h = (far - near) / bins as f64;
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in weights {
        acc += w.max(0.0) / total;
        cdf.push(acc);
    }
    let us: Vec<f64> = match jitter {
        None => (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect(),
        Some(rng) => (0..k).map(|i| (i as f64 + rng.random::<f64>()) / k as f64).collect(),
    };
    us.into_iter()
        .map(|u| {
            let u = u.min(cdf[bins]);
            // first bin whose upper CDF value reaches u
            let j = cdf[1..].partition_point(|&c| c < u).min(bins - 1);
            let mass = cdf[j + 1] - cdf[j];
            let frac = if mass > 0.0 { ((u - cdf[j]) / mass).clamp(0.0, 1.0) } else { 0.5 };
            near + (j as f64 + frac) * h
        })
        .collect()
}

/// Sorted union of two sample sets, dropping values that do not strictly
/// exceed their predecessor by a tiny gap.
pub fn merge_samples(a: &[f64], b: &[f64], near: f64, far: f64) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b).copied().filter(|&t| t >= near && t < far).collect();
    all.sort_by(f64::total_cmp);
    let gap = 1e-9 * (far - near);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for t in all {
        if out.last().is_none_or(|&p| t > p + gap) {
            out.push(t);
        }
    }
    out
}

/// Sampling strategy along a ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Uniform { samples: usize },
    /// A uniform pass of `coarse` samples, then `fine` samples drawn from
    /// the coarse compositing weights.
    Hierarchical { coarse: usize, fine: usize },
}

/// Samples `ray` over `[near, far]`. For the hierarchical strategy,
/// `coarse_weights` evaluates the per-sample weights `T_i (a^S_i + a^D_i)`
/// of the first pass.
pub fn sample_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    strategy: Strategy,
    mut jitter: Option<&mut dyn RngCore>,
    coarse_weights: impl FnOnce(&RaySamples) -> Vec<f64>,
) -> RaySamples {
    match strategy {
        Strategy::Uniform { samples } => RaySamples::new(ray, sample_uniform(near, far, samples, jitter), far),
        Strategy::Hierarchical { coarse, fine } => {
            let t0 = match jitter.as_mut() {
                Some(r) => sample_uniform(near, far, coarse, Some(&mut **r)),
                None => sample_uniform(near, far, coarse, None),
            };
            let first = RaySamples::new(ray, t0.clone(), far);
            let w = coarse_weights(&first);
            let t1 = sample_pdf(near, far, &w, fine, jitter);
            RaySamples::new(ray, merge_samples(&t0, &t1, near, far), far)
        }
    }
}

/// Borrowed per-sample outputs of one branch along one ray.
#[derive(Debug, Clone, Copy)]
pub struct BranchView<'a> {
    pub sigma: &'a [f64],
    pub color: ArrayView2<'a, f64>,
    pub probs: ArrayView2<'a, f64>,
    /// Empty for the static branch.
    pub shadow: &'a [f64],
}

impl<'a> BranchView<'a> {
    pub fn of(batch: &'a BranchBatch, range: Range<usize>) -> Self {
        let shadow = if batch.shadow.is_empty() { &[][..] } else { &batch.shadow[range.clone()] };
        BranchView {
            sigma: &batch.sigma[range.clone()],
            color: batch.color.slice(ndarray::s![range.clone(), ..]),
            probs: batch.probs.slice(ndarray::s![range, ..]),
            shadow,
        }
    }

    fn len(&self) -> usize {
        self.sigma.len()
    }
}

/// Owned per-sample values gathered from [`BranchOutput`]s.
#[derive(Debug, Clone)]
pub struct BranchColumns {
    pub sigma: Vec<f64>,
    pub color: Array2<f64>,
    pub probs: Array2<f64>,
    pub shadow: Vec<f64>,
}

impl BranchColumns {
    pub fn from_outputs(outputs: &[BranchOutput], with_shadow: bool) -> Self {
        let k = outputs.len();
        let l = outputs.first().map_or(0, |o| o.semantic_logits.len());
        let mut color = Array2::zeros((k, 3));
        let mut probs = Array2::zeros((k, l));
        for (i, o) in outputs.iter().enumerate() {
            for c in 0..3 {
                color[[i, c]] = o.color[c];
            }
            for (j, p) in pointwise_softmax(&o.semantic_logits).into_iter().enumerate() {
                probs[[i, j]] = p;
            }
        }
        BranchColumns {
            sigma: outputs.iter().map(|o| o.sigma).collect(),
            color,
            probs,
            shadow: if with_shadow { outputs.iter().map(|o| o.shadow).collect() } else { Vec::new() },
        }
    }

    pub fn view(&self) -> BranchView<'_> {
        BranchView { sigma: &self.sigma, color: self.color.view(), probs: self.probs.view(), shadow: &self.shadow }
    }
}

/// Per-sample intermediates kept for the backward pass and the per-sample
/// regularizers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerSample {
    pub transmittance: Vec<f64>,
    pub alpha_static: Vec<f64>,
    pub alpha_dynamic: Vec<f64>,
    pub alpha_total: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Composited quantities of one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBundle {
    pub composed_color: [f64; 3],
    pub static_color: [f64; 3],
    pub dynamic_color: [f64; 3],
    pub depth: f64,
    pub static_depth: f64,
    pub semantics: Vec<f64>,
    pub static_semantics: Vec<f64>,
    pub dynamic_opacity: f64,
    /// `sum T_i (a^S_i + a^D_i)`, the rendered semantic mass.
    pub total_opacity: f64,
    pub shadow_map: f64,
    /// Transmittance past the last sample, `T_{K+1}`.
    pub final_transmittance: f64,
    pub per_sample: PerSample,
}

/// Joint compositing of both branches along one ray.
pub fn composite(samples: &RaySamples, s: BranchView<'_>, d: BranchView<'_>) -> RenderBundle {
    let k = samples.len();
    assert!(s.len() == k && d.len() == k, "branch outputs must match the sample count");
    let l = s.probs.ncols();
    assert_eq!(d.probs.ncols(), l);
    let mut b = RenderBundle {
        composed_color: [0.0; 3],
        static_color: [0.0; 3],
        dynamic_color: [0.0; 3],
        depth: 0.0,
        static_depth: 0.0,
        semantics: vec![0.0; l],
        static_semantics: vec![0.0; l],
        dynamic_opacity: 0.0,
        total_opacity: 0.0,
        shadow_map: 0.0,
        final_transmittance: 0.0,
        per_sample: PerSample {
            transmittance: Vec::with_capacity(k),
            alpha_static: Vec::with_capacity(k),
            alpha_dynamic: Vec::with_capacity(k),
            alpha_total: Vec::with_capacity(k),
            rho: Vec::with_capacity(k),
        },
    };
    let mut optical = 0.0f64;
    for i in 0..k {
        let delta = samples.deltas[i];
        let t = (-optical).exp();
        let a_s = -(-s.sigma[i] * delta).exp_m1();
        let a_d = -(-d.sigma[i] * delta).exp_m1();
        let a_tot = -(-(s.sigma[i] + d.sigma[i]) * delta).exp_m1();
        let rho = d.shadow.get(i).copied().unwrap_or(0.0);
        let (ws, wd) = (t * a_s, t * a_d);
        for c in 0..3 {
            let cs = s.color[[i, c]];
            let cd = d.color[[i, c]];
            b.composed_color[c] += ws * (1.0 - rho) * cs + wd * cd;
            b.static_color[c] += ws * cs;
            b.dynamic_color[c] += wd * cd;
        }
        for j in 0..l {
            let ss = ws * s.probs[[i, j]];
            b.semantics[j] += ss + wd * d.probs[[i, j]];
            b.static_semantics[j] += ss;
        }
        let ti = samples.t_values[i];
        b.depth += (ws + wd) * ti;
        b.static_depth += ws * ti;
        b.dynamic_opacity += wd;
        b.total_opacity += ws + wd;
        b.shadow_map += t * a_tot * rho;
        let ps = &mut b.per_sample;
        ps.transmittance.push(t);
        ps.alpha_static.push(a_s);
        ps.alpha_dynamic.push(a_d);
        ps.alpha_total.push(a_tot);
        ps.rho.push(rho);
        optical += (s.sigma[i] + d.sigma[i]) * delta;
    }
    b.final_transmittance = (-optical).exp();
    b
}

/// Convenience wrapper over [`composite`] taking per-sample branch outputs;
/// logits are turned into probabilities point by point.
pub fn composite_outputs(samples: &RaySamples, static_out: &[BranchOutput], dynamic_out: &[BranchOutput]) -> RenderBundle {
    let s = BranchColumns::from_outputs(static_out, false);
    let d = BranchColumns::from_outputs(dynamic_out, true);
    composite(samples, s.view(), d.view())
}

/// Rendered semantics `(S, S^S)` of one ray from per-sample probabilities.
pub fn composite_semantics(
    samples: &RaySamples,
    sigma_static: &[f64],
    sigma_dynamic: &[f64],
    static_probs: ArrayView2<f64>,
    dynamic_probs: ArrayView2<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let k = samples.len();
    let zeros = Array2::zeros((k, 3));
    let s = BranchView { sigma: sigma_static, color: zeros.view(), probs: static_probs, shadow: &[] };
    let d = BranchView { sigma: sigma_dynamic, color: zeros.view(), probs: dynamic_probs, shadow: &[] };
    let b = composite(samples, s, d);
    (b.semantics, b.static_semantics)
}

/// Per-pixel motion mask `O^D >= threshold`.
pub fn render_motion_mask(dynamic_opacity: &[f64], threshold: f64) -> Vec<bool> {
    dynamic_opacity.iter().map(|&o| o >= threshold).collect()
}

/// Upstream gradients on the ray-level fields of a [`RenderBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGrad {
    pub composed_color: [f64; 3],
    pub static_color: [f64; 3],
    pub dynamic_color: [f64; 3],
    pub depth: f64,
    pub static_depth: f64,
    pub semantics: Vec<f64>,
    pub static_semantics: Vec<f64>,
    pub dynamic_opacity: f64,
    pub total_opacity: f64,
    pub shadow_map: f64,
}

impl BundleGrad {
    pub fn zeros(classes: usize) -> Self {
        BundleGrad {
            composed_color: [0.0; 3],
            static_color: [0.0; 3],
            dynamic_color: [0.0; 3],
            depth: 0.0,
            static_depth: 0.0,
            semantics: vec![0.0; classes],
            static_semantics: vec![0.0; classes],
            dynamic_opacity: 0.0,
            total_opacity: 0.0,
            shadow_map: 0.0,
        }
    }
}

/// Upstream gradients on per-sample quantities used directly by losses.
/// Empty vectors stand for zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleGrad {
    pub transmittance: Vec<f64>,
    pub alpha_static: Vec<f64>,
    pub alpha_dynamic: Vec<f64>,
    pub alpha_total: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma_static: Vec<f64>,
    pub sigma_dynamic: Vec<f64>,
}

impl SampleGrad {
    pub fn zeros(k: usize) -> Self {
        SampleGrad {
            transmittance: vec![0.0; k],
            alpha_static: vec![0.0; k],
            alpha_dynamic: vec![0.0; k],
            alpha_total: vec![0.0; k],
            rho: vec![0.0; k],
            sigma_static: vec![0.0; k],
            sigma_dynamic: vec![0.0; k],
        }
    }
}

fn at(v: &[f64], i: usize) -> f64 {
    v.get(i).copied().unwrap_or(0.0)
}

/// Gradients on every per-sample input of [`composite`].
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrad {
    pub sigma_static: Vec<f64>,
    pub sigma_dynamic: Vec<f64>,
    pub color_static: Array2<f64>,
    pub color_dynamic: Array2<f64>,
    pub probs_static: Array2<f64>,
    pub probs_dynamic: Array2<f64>,
    pub rho: Vec<f64>,
    pub t_values: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Exact adjoint of [`composite`], including the coupling of every sample
/// to the transmittance of the samples behind it.
pub fn composite_backward(
    samples: &RaySamples,
    s: BranchView<'_>,
    d: BranchView<'_>,
    bundle: &RenderBundle,
    up: &BundleGrad,
    direct: &SampleGrad,
) -> CompositeGrad {
    let k = samples.len();
    let l = s.probs.ncols();
    let ps = &bundle.per_sample;
    let mut g = CompositeGrad {
        sigma_static: vec![0.0; k],
        sigma_dynamic: vec![0.0; k],
        color_static: Array2::zeros((k, 3)),
        color_dynamic: Array2::zeros((k, 3)),
        probs_static: Array2::zeros((k, l)),
        probs_dynamic: Array2::zeros((k, l)),
        rho: vec![0.0; k],
        t_values: vec![0.0; k],
        deltas: vec![0.0; k],
    };
    // dL/dT_i * T_i, consumed by the suffix sums below
    let mut gt_t = vec![0.0; k];
    let mut g_as = vec![0.0; k];
    let mut g_ad = vec![0.0; k];
    let mut g_atot = vec![0.0; k];
    for i in 0..k {
        let (t, a_s, a_d, a_tot, rho) =
            (ps.transmittance[i], ps.alpha_static[i], ps.alpha_dynamic[i], ps.alpha_total[i], ps.rho[i]);
        let ti = samples.t_values[i];
        // per-unit-weight contributions of the static and dynamic terms
        let mut unit_s = (up.depth + up.static_depth) * ti + up.total_opacity;
        let mut unit_d = up.depth * ti + up.total_opacity + up.dynamic_opacity;
        let mut rho_term = 0.0;
        for c in 0..3 {
            let cs = s.color[[i, c]];
            let cd = d.color[[i, c]];
            unit_s += up.composed_color[c] * (1.0 - rho) * cs + up.static_color[c] * cs;
            unit_d += (up.composed_color[c] + up.dynamic_color[c]) * cd;
            rho_term += up.composed_color[c] * cs;
            g.color_static[[i, c]] = t * a_s * ((1.0 - rho) * up.composed_color[c] + up.static_color[c]);
            g.color_dynamic[[i, c]] = t * a_d * (up.composed_color[c] + up.dynamic_color[c]);
        }
        for j in 0..l {
            let (ss, sd) = (s.probs[[i, j]], d.probs[[i, j]]);
            unit_s += (up.semantics[j] + up.static_semantics[j]) * ss;
            unit_d += up.semantics[j] * sd;
            g.probs_static[[i, j]] = t * a_s * (up.semantics[j] + up.static_semantics[j]);
            g.probs_dynamic[[i, j]] = t * a_d * up.semantics[j];
        }
        let g_t = a_s * unit_s + a_d * unit_d + a_tot * rho * up.shadow_map + at(&direct.transmittance, i);
        gt_t[i] = g_t * t;
        g_as[i] = t * unit_s + at(&direct.alpha_static, i);
        g_ad[i] = t * unit_d + at(&direct.alpha_dynamic, i);
        g_atot[i] = t * rho * up.shadow_map + at(&direct.alpha_total, i);
        g.rho[i] = -t * a_s * rho_term + t * a_tot * up.shadow_map + at(&direct.rho, i);
        g.t_values[i] = t * ((a_s + a_d) * up.depth + a_s * up.static_depth);
    }
    // T_i depends on every (sigma_j, delta_j) with j < i
    let mut suffix = 0.0;
    for j in (0..k).rev() {
        let delta = samples.deltas[j];
        let (ss, sd) = (s.sigma[j], d.sigma[j]);
        let (a_s, a_d, a_tot) = (ps.alpha_static[j], ps.alpha_dynamic[j], ps.alpha_total[j]);
        let behind = -suffix;
        g.sigma_static[j] =
            g_as[j] * delta * (1.0 - a_s) + g_atot[j] * delta * (1.0 - a_tot) + behind * delta + at(&direct.sigma_static, j);
        g.sigma_dynamic[j] = g_ad[j] * delta * (1.0 - a_d)
            + g_atot[j] * delta * (1.0 - a_tot)
            + behind * delta
            + at(&direct.sigma_dynamic, j);
        g.deltas[j] = g_as[j] * ss * (1.0 - a_s)
            + g_ad[j] * sd * (1.0 - a_d)
            + g_atot[j] * (ss + sd) * (1.0 - a_tot)
            + behind * (ss + sd);
        suffix += gt_t[j];
    }
    g
}

/// Dynamic color alpha-blended over a constant background for display.
pub fn blend_over(premultiplied: [f64; 3], opacity: f64, background: [f64; 3]) -> [f64; 3] {
    let a = opacity.clamp(0.0, 1.0);
    [0, 1, 2].map(|c| (premultiplied[c] + (1.0 - a) * background[c]).clamp(0.0, 1.0))
}
