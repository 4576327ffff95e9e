//! Training objectives and their exact gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! its direct inputs; chaining through compositing and the fields happens in
//! [`crate::pipeline`].

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec3;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SKY_GUARD: f64 = 1e-4;
pub const CE_FLOOR: f64 = 1e-12;
pub const ENTROPY_CLAMP: f64 = 1e-6;
pub const ENTROPY_MIN_ALPHA: f64 = 1e-8;
/// Side of the box filter applied to inlier labels.
pub const BOX_FILTER: usize = 3;
/// Side of the square tiles of the sub-patch consistency filter.
pub const TILE: usize = 5;
pub const TILE_INLIER: f64 = 0.6;
pub const TILE_OUTLIER: f64 = 0.4;
/// Minimum road pixels for a patch to enter the planar loss.
pub const ROAD_MIN_POINTS: usize = 4;

/// Term weights of the full objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_sem: f64,
    pub lambda_sky: f64,
    pub lambda_road: f64,
    pub lambda_sigma_d: f64,
    pub lambda_rho: f64,
    pub lambda_h: f64,
    pub dssim_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_d: 0.5,
            lambda_sem: 0.1,
            lambda_sky: 0.03,
            lambda_road: 0.1,
            lambda_sigma_d: 0.05,
            lambda_rho: 0.3,
            lambda_h: 0.01,
            dssim_weight: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_d,
            self.lambda_sem,
            self.lambda_sky,
            self.lambda_road,
            self.lambda_sigma_d,
            self.lambda_rho,
            self.lambda_h,
            self.dssim_weight,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Named loss terms, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    Rgb,
    Depth,
    Semantic,
    Robust,
    Sky,
    Road,
    SigmaD,
    Rho,
    Entropy,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::Rgb,
        Term::Depth,
        Term::Semantic,
        Term::Robust,
        Term::Sky,
        Term::Road,
        Term::SigmaD,
        Term::Rho,
        Term::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rgb => "rgb",
            Term::Depth => "depth",
            Term::Semantic => "sem",
            Term::Robust => "robust",
            Term::Sky => "sky",
            Term::Road => "road",
            Term::SigmaD => "sigma_d",
            Term::Rho => "rho",
            Term::Entropy => "entropy",
        }
    }

    pub fn weight(self, w: &LossWeights) -> f64 {
        match self {
            Term::Rgb | Term::Robust => 1.0,
            Term::Depth => w.lambda_d,
            Term::Semantic => w.lambda_sem,
            Term::Sky => w.lambda_sky,
            Term::Road => w.lambda_road,
            Term::SigmaD => w.lambda_sigma_d,
            Term::Rho => w.lambda_rho,
            Term::Entropy => w.lambda_h,
        }
    }
}

/// Training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Static branch only, robust and sky terms.
    Init,
    Full,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Full => "full",
        }
    }

    pub fn default_terms(self) -> Vec<Term> {
        match self {
            Phase::Init => vec![Term::Robust, Term::Sky],
            Phase::Full => Term::ALL.to_vec(),
        }
    }
}

/// Per-term values and their weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: Phase,
    /// Unweighted values of the active terms, in [`Term::ALL`] order.
    pub terms: Vec<(Term, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.iter().find(|(t, _)| *t == term).map(|(_, v)| *v)
    }
}

/// Weighted sum of the given term values. Terms are summed in
/// [`Term::ALL`] order regardless of input order.
pub fn loss_total(values: &[(Term, f64)], weights: &LossWeights, phase: Phase) -> LossReport {
    let mut terms: Vec<(Term, f64)> = values.to_vec();
    terms.sort_by_key(|(t, _)| *t);
    let total = terms.iter().map(|(t, v)| t.weight(weights) * v).sum();
    LossReport { phase, terms, total }
}

/// Returns the first non-finite term, if any.
pub fn first_non_finite(report: &LossReport) -> Option<Term> {
    report.terms.iter().find(|(_, v)| !v.is_finite()).map(|(t, _)| *t)
}

/// SSIM of one channel over a whole window with uniform weights.
pub fn ssim_window(x: &[f64], y: &[f64]) -> f64 {
    ssim_window_grad(x, y, None)
}

/// SSIM over a whole window; when `grad` is given, adds `dSSIM/dx` to it.
pub fn ssim_window_grad(x: &[f64], y: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    let a1 = 2.0 * mx * my + SSIM_C1;
    let a2 = 2.0 * cxy + SSIM_C2;
    let b1 = mx * mx + my * my + SSIM_C1;
    let b2 = vx + vy + SSIM_C2;
    let s = a1 * a2 / (b1 * b2);
    if let Some(g) = grad {
        for i in 0..x.len() {
            let da1 = 2.0 * my / n;
            let da2 = 2.0 * (y[i] - my) / n;
            let db1 = 2.0 * mx / n;
            let db2 = 2.0 * (x[i] - mx) / n;
            g[i] += (da1 * a2 + a1 * da2) / (b1 * b2) - s * (db1 * b2 + b1 * db2) / (b1 * b2);
        }
    }
    s
}

fn channel(pixels: &[[f64; 3]], c: usize) -> Vec<f64> {
    pixels.iter().map(|p| p[c]).collect()
}

/// Mean of the per-channel `(1 - SSIM) / 2` over a full patch.
pub fn dssim_patch(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    (0..3).map(|c| (1.0 - ssim_window(&channel(pred, c), &channel(gt, c))) / 2.0).sum::<f64>() / 3.0
}

/// Photometric loss on patches of `patch_pixels` consecutive rays: mean
/// squared error over pixels and channels plus `dssim_weight` times the
/// mean patch DSSIM. Returns the value and the gradient on `pred`.
pub fn loss_rgb(pred: &[[f64; 3]], gt: &[[f64; 3]], patch_pixels: usize, dssim_weight: f64) -> (f64, Vec<[f64; 3]>) {
    assert_eq!(pred.len(), gt.len());
    assert!(patch_pixels > 0 && pred.len() % patch_pixels == 0, "rays must form whole patches");
    let n = pred.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut grad = vec![[0.0; 3]; n];
    let mut mse = 0.0;
    let scale = 1.0 / (3 * n) as f64;
    for i in 0..n {
        for c in 0..3 {
            let e = pred[i][c] - gt[i][c];
            mse += e * e;
            grad[i][c] = 2.0 * e * scale;
        }
    }
    mse *= scale;
    let patches = n / patch_pixels;
    let mut dssim = 0.0;
    if dssim_weight != 0.0 {
        let w = dssim_weight / (patches as f64 * 3.0);
        let mut buf = vec![0.0; patch_pixels];
        for p in 0..patches {
            let r = p * patch_pixels..(p + 1) * patch_pixels;
            for c in 0..3 {
                let x = channel(&pred[r.clone()], c);
                let y = channel(&gt[r.clone()], c);
                buf.fill(0.0);
                let s = ssim_window_grad(&x, &y, Some(&mut buf));
                dssim += (1.0 - s) / 2.0;
                for (k, i) in r.clone().enumerate() {
                    grad[i][c] -= w * buf[k] / 2.0;
                }
            }
        }
        dssim /= patches as f64 * 3.0;
    }
    (mse + dssim_weight * dssim, grad)
}

/// Mean squared depth error over supervised rays.
pub fn loss_depth(pred: &[f64], gt: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; pred.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let e = pred[i] - gt[i];
            sum += e * e;
            grad[i] = 2.0 * e / count as f64;
        }
    }
    (sum / count as f64, grad)
}

/// Cross-entropy of the renormalized rendered semantics, floored at
/// [`CE_FLOOR`], averaged over rays.
pub fn loss_semantic(rendered: &[Vec<f64>], gt: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = rendered.len();
    let mut grad: Vec<Vec<f64>> = rendered.iter().map(|s| vec![0.0; s.len()]).collect();
    if n == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for (r, s) in rendered.iter().enumerate() {
        let mass: f64 = s.iter().sum();
        let p = if mass > 0.0 { s[gt[r]] / mass } else { 0.0 };
        if p > CE_FLOOR {
            sum -= p.ln();
            for (k, g) in grad[r].iter_mut().enumerate() {
                *g = 1.0 / (mass * n as f64);
                if k == gt[r] {
                    *g -= 1.0 / (s[k] * n as f64);
                }
            }
        } else {
            sum -= CE_FLOOR.ln();
        }
    }
    (sum / n as f64, grad)
}

/// Binary inlier map of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsWeightMap {
    pub residuals: Vec<f64>,
    pub threshold: f64,
    /// Labels before spatial filtering.
    pub raw: Vec<bool>,
    /// Final weights in {0, 1}.
    pub weights: Vec<f64>,
}

impl IrlsWeightMap {
    pub fn inlier_fraction(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len().max(1) as f64
    }
}

/// Nearest-rank percentile: the `ceil(fraction * n)`-th smallest value.
pub fn nearest_rank(values: &[f64], fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("percentile of an empty batch".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// 3x3 box filter with edge replication over a `size x size` label patch;
/// a pixel is inlier when the smoothed value reaches 1/2.
pub fn box_filter_labels(labels: &[bool], size: usize) -> Vec<bool> {
    assert_eq!(labels.len(), size * size);
    let half = (BOX_FILTER / 2) as isize;
    let clampi = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut out = vec![false; labels.len()];
    for r in 0..size {
        for c in 0..size {
            let mut count = 0usize;
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = clampi(r as isize + dr);
                    let cc = clampi(c as isize + dc);
                    count += labels[rr * size + cc] as usize;
                }
            }
            // count / 9 >= 1/2, in integers
            out[r * size + c] = 2 * count >= BOX_FILTER * BOX_FILTER;
        }
    }
    out
}

/// Sub-patch consistency: each [`TILE`]-sided tile whose inlier fraction is
/// at least 0.6 becomes all inlier, at most 0.4 all outlier; tiles in
/// between keep their labels.
pub fn tile_consistency(labels: &[bool], size: usize) -> Vec<bool> {
    assert_eq!(labels.len(), size * size);
    let mut out = labels.to_vec();
    let mut r0 = 0;
    while r0 < size {
        let r1 = (r0 + TILE).min(size);
        let mut c0 = 0;
        while c0 < size {
            let c1 = (c0 + TILE).min(size);
            let total = (r1 - r0) * (c1 - c0);
            let inl = (r0..r1)
                .flat_map(|r| (c0..c1).map(move |c| r * size + c))
                .filter(|&i| labels[i])
                .count();
            let frac = inl as f64 / total as f64;
            let fill = if frac >= TILE_INLIER {
                Some(true)
            } else if frac <= TILE_OUTLIER {
                Some(false)
            } else {
                None
            };
            if let Some(v) = fill {
                for r in r0..r1 {
                    for c in c0..c1 {
                        out[r * size + c] = v;
                    }
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
    out
}

/// Trimmed-kernel weights for a batch of square patches stored patch-major,
/// row-major inside each patch. The threshold is the nearest-rank
/// percentile of all residuals at `fraction`.
pub fn irls_weights(residuals: &[f64], fraction: f64, patch_size: usize) -> Result<IrlsWeightMap> {
    let threshold = nearest_rank(residuals, fraction)?;
    let pp = patch_size * patch_size;
    if pp == 0 || residuals.len() % pp != 0 {
        return Err(Error::Argument("residuals do not form whole patches".into()));
    }
    let raw: Vec<bool> = residuals.iter().map(|&e| e <= threshold).collect();
    let mut weights = Vec::with_capacity(raw.len());
    for patch in raw.chunks(pp) {
        let smoothed = box_filter_labels(patch, patch_size);
        let tiled = tile_consistency(&smoothed, patch_size);
        weights.extend(tiled.into_iter().map(|b| if b { 1.0 } else { 0.0 }));
    }
    Ok(IrlsWeightMap { residuals: residuals.to_vec(), threshold, raw, weights })
}

/// Weighted static-branch squared error, averaged over rays.
pub fn loss_robust(static_color: &[[f64; 3]], gt: &[[f64; 3]], weights: &[f64]) -> (f64, Vec<[f64; 3]>) {
    let n = static_color.len();
    let mut grad = vec![[0.0; 3]; n];
    if n == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for c in 0..3 {
            let e = static_color[i][c] - gt[i][c];
            sum += weights[i] * e * e;
            grad[i][c] = 2.0 * weights[i] * e / n as f64;
        }
    }
    (sum / n as f64, grad)
}

/// Sky loss over sky rays, given the total density of every sample:
/// mean of the first `K-1` densities plus `1 / (sigma_K + guard)`.
pub fn loss_sky(sigma_total: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = sigma_total.len();
    let mut grad: Vec<Vec<f64>> = sigma_total.iter().map(|s| vec![0.0; s.len()]).collect();
    if n == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for (r, s) in sigma_total.iter().enumerate() {
        let k = s.len();
        assert!(k >= 2, "sky loss needs at least two samples");
        let front = (k - 1) as f64;
        for i in 0..k - 1 {
            sum += s[i] / front;
            grad[r][i] = 1.0 / (front * n as f64);
        }
        let last = s[k - 1] + SKY_GUARD;
        sum += 1.0 / last;
        grad[r][k - 1] = -1.0 / (last * last * n as f64);
    }
    (sum / n as f64, grad)
}

/// Smallest singular value of the centered point set and the unit
/// right-singular vector it belongs to.
pub fn smallest_singular(points: &[Vec3]) -> (f64, Vec3) {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut m = Matrix3::zeros();
    for p in points {
        let x = p - mean;
        m += x * x.transpose();
    }
    let eig = SymmetricEigen::new(m);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("three eigenvalues");
    let v: Vec3 = eig.eigenvectors.column(idx).into_owned().normalize();
    // |X v| is far more accurate than sqrt(lambda) for near-planar sets
    let s = points.iter().map(|p| (p - mean).dot(&v).powi(2)).sum::<f64>().sqrt();
    (s, v)
}

/// Planar road loss: mean over patches with at least [`ROAD_MIN_POINTS`]
/// points of the smallest singular value of the centered points. The
/// gradient treats the singular vector as constant.
pub fn loss_road(patches: &[Vec<Vec3>]) -> (f64, Vec<Vec<Vec3>>) {
    let mut grad: Vec<Vec<Vec3>> = patches.iter().map(|p| vec![Vec3::zeros(); p.len()]).collect();
    let used: Vec<usize> = (0..patches.len()).filter(|&i| patches[i].len() >= ROAD_MIN_POINTS).collect();
    if used.is_empty() {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for &i in &used {
        let pts = &patches[i];
        let (s, v) = smallest_singular(pts);
        sum += s;
        if s > 0.0 {
            let n = pts.len() as f64;
            let mean = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
            for (g, p) in grad[i].iter_mut().zip(pts) {
                *g = v * ((p - mean).dot(&v) / (s * used.len() as f64));
            }
        }
    }
    (sum / used.len() as f64, grad)
}

fn binary_entropy(p: f64) -> f64 {
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Opacity-weighted binary entropy of the dynamic share, averaged over all
/// samples. Returns gradients on `alpha_static` and `alpha_dynamic`.
pub fn loss_entropy(alpha_static: &[f64], alpha_dynamic: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = alpha_static.len();
    let mut gs = vec![0.0; n];
    let mut gd = vec![0.0; n];
    if n == 0 {
        return (0.0, gs, gd);
    }
    let mut sum = 0.0;
    for i in 0..n {
        let (a, b) = (alpha_static[i], alpha_dynamic[i]);
        let w = a + b;
        if w < ENTROPY_MIN_ALPHA {
            continue;
        }
        let raw = b / w;
        let p = raw.clamp(ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP);
        let h = binary_entropy(p);
        sum += h * w;
        let dh = if p == raw { ((1.0 - p) / p).ln() } else { 0.0 };
        gs[i] = (h - dh * b / w) / n as f64;
        gd[i] = (h + dh * a / w) / n as f64;
    }
    (sum / n as f64, gs, gd)
}

/// Per-ray inputs of the dynamic sparsity terms.
#[derive(Debug, Clone, Copy)]
pub struct SparsityRay<'a> {
    pub sigma_dynamic: &'a [f64],
    pub transmittance: &'a [f64],
    pub alpha_total: &'a [f64],
    pub rho: &'a [f64],
}

/// Gradients of the sparsity terms for one ray.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityGrad {
    pub sigma_dynamic: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub alpha_total: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Returns `(L_sigmaD, L_rho)` with gradients of each; both are means over
/// rays of per-ray sample means.
pub fn loss_dynamic_sparsity(rays: &[SparsityRay<'_>]) -> ((f64, f64), Vec<SparsityGrad>, Vec<SparsityGrad>) {
    let n = rays.len();
    let mut sig = 0.0;
    let mut rho = 0.0;
    let mut g_sig = Vec::with_capacity(n);
    let mut g_rho = Vec::with_capacity(n);
    for r in rays {
        let k = r.sigma_dynamic.len();
        let scale = 1.0 / (k as f64 * n as f64);
        sig += r.sigma_dynamic.iter().sum::<f64>() / k as f64;
        g_sig.push(SparsityGrad {
            sigma_dynamic: vec![scale; k],
            transmittance: vec![0.0; k],
            alpha_total: vec![0.0; k],
            rho: vec![0.0; k],
        });
        let mut acc = 0.0;
        let mut g = SparsityGrad {
            sigma_dynamic: vec![0.0; k],
            transmittance: vec![0.0; k],
            alpha_total: vec![0.0; k],
            rho: vec![0.0; k],
        };
        for i in 0..k {
            let (t, a, p) = (r.transmittance[i], r.alpha_total[i], r.rho[i]);
            acc += t * a * p * p;
            g.transmittance[i] = a * p * p * scale;
            g.alpha_total[i] = t * p * p * scale;
            g.rho[i] = 2.0 * t * a * p * scale;
        }
        rho += acc / k as f64;
        g_rho.push(g);
    }
    if n > 0 {
        sig /= n as f64;
        rho /= n as f64;
    }
    ((sig, rho), g_sig, g_rho)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_closed_forms() {
        let gt = vec![[0.3, 0.5, 0.2]; 9];
        assert_eq!(loss_rgb(&gt, &gt, 9, 0.1).0, 0.0);
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|v| v + 0.1)).collect();
        assert!((loss_rgb(&pred, &gt, 9, 0.0).0 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn depth_closed_forms() {
        assert_eq!(loss_depth(&[2.0], &[3.0], &[true]).0, 1.0);
        assert_eq!(loss_depth(&[2.0], &[3.0], &[false]).0, 0.0);
        assert_eq!(loss_depth(&[3.0, 1.0], &[3.0, 1.0], &[true, true]).0, 0.0);
    }

    #[test]
    fn semantic_closed_forms() {
        assert_eq!(loss_semantic(&[vec![0.0, 1.0, 0.0, 0.0]], &[1]).0, 0.0);
        let v = loss_semantic(&[vec![0.2; 4]], &[2]).0;
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nearest_rank_examples() {
        let w = irls_weights(&[1.0, 2.0, 3.0, 4.0], 0.75, 1).unwrap();
        assert_eq!(w.threshold, 3.0);
        assert_eq!(w.weights, vec![1.0, 1.0, 1.0, 0.0]);
        let w = irls_weights(&[0.7; 225], 0.75, 15).unwrap();
        assert!(w.weights.iter().all(|v| *v == 1.0));
        assert!(irls_weights(&[], 0.75, 15).is_err());
    }

    #[test]
    fn isolated_outlier_is_smoothed_away() {
        let mut labels = vec![true; 225];
        labels[7 * 15 + 7] = false;
        let f = box_filter_labels(&labels, 15);
        assert!(f.iter().all(|b| *b));
    }

    #[test]
    fn tiles_apply_hysteresis() {
        let mut labels = vec![true; 225];
        // 12 of the first tile's 25 pixels outlier: fraction 0.52 stays mixed
        for i in 0..12 {
            labels[(i / 5) * 15 + i % 5] = false;
        }
        assert_eq!(tile_consistency(&labels, 15), labels);
        // 16 outliers: inlier fraction 0.36, whole tile flips
        for i in 12..16 {
            labels[(i / 5) * 15 + i % 5] = false;
        }
        let t = tile_consistency(&labels, 15);
        for r in 0..5 {
            for c in 0..5 {
                assert!(!t[r * 15 + c]);
            }
        }
        assert!(t[5 * 15 + 5]);
    }

    #[test]
    fn sky_closed_forms() {
        let (v, _) = loss_sky(&[vec![1.0; 5]]);
        assert!((v - (1.0 + 1.0 / (1.0 + SKY_GUARD))).abs() < 1e-12);
        let mut s = vec![0.0; 8];
        s[7] = 1e3;
        assert!(loss_sky(&[s]).0 < 2e-3);
    }

    #[test]
    fn sky_gradient_signs() {
        let (_, g) = loss_sky(&[vec![0.5, 0.5, 0.5, 2.0]]);
        assert!(g[0][..3].iter().all(|v| *v > 0.0));
        assert!(g[0][3] < 0.0);
    }

    #[test]
    fn road_degenerate_sets() {
        let plane: Vec<Vec3> = (0..12)
            .map(|i| Vec3::new(i as f64 * 0.37 - 1.0, 0.0, (i * i) as f64 * 0.11))
            .collect();
        assert!(loss_road(&[plane]).0 < 1e-9);
        let line: Vec<Vec3> = (0..6).map(|i| Vec3::new(1.0, 2.0, 3.0) * i as f64).collect();
        assert!(loss_road(&[line]).0 < 1e-9);
        let few = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert_eq!(loss_road(&[few]).0, 0.0);
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((loss_entropy(&[0.5], &[0.5]).0 - 2f64.ln()).abs() < 1e-12);
        assert!(loss_entropy(&[0.7], &[0.0]).0 < 1e-4);
        assert_eq!(loss_entropy(&[0.0], &[0.0]).0, 0.0);
    }

    #[test]
    fn sparsity_closed_forms() {
        let r = SparsityRay { sigma_dynamic: &[0.0], transmittance: &[1.0], alpha_total: &[1.0], rho: &[0.5] };
        let ((s, p), _, _) = loss_dynamic_sparsity(&[r]);
        assert_eq!(s, 0.0);
        assert_eq!(p, 0.25);
    }

    #[test]
    fn totals_follow_phase_weights() {
        let w = LossWeights::default();
        let r = loss_total(&[(Term::Sky, 2.0), (Term::Robust, 0.5)], &w, Phase::Init);
        assert!((r.total - (0.5 + 0.03 * 2.0)).abs() < 1e-15);
        let zero: Vec<(Term, f64)> = Term::ALL.iter().map(|t| (*t, 0.0)).collect();
        assert_eq!(loss_total(&zero, &w, Phase::Full).total, 0.0);
    }
}
