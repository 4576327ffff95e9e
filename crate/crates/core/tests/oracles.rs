//! Independent reference implementations checked against the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duofield::encoding::{hash_coords, HashGrid, HashGridConfig};
use duofield::field::{BranchOutput, MASKED_LOGIT};
use duofield::loss::{dssim_patch, SSIM_C1, SSIM_C2};
use duofield::metrics::{aggregate, ssim, FrameMetrics, MaskCounts, Split};
use duofield::render::{composite_outputs, RaySamples};
use duofield::scene::{Ray, Vec3};
use duofield::train::{adam_step, AdamConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multilinear interpolation over the full lattice of a level, addressing
/// vertices directly when the lattice fits in the table and through the
/// spatial hash otherwise.
fn lattice_oracle(grid: &HashGrid, p: &[f64]) -> Vec<f64> {
    let cfg = &grid.config;
    let dim = cfg.dimensionality;
    let f = cfg.features_per_entry;
    let mut out = Vec::new();
    let mut level_base = 0;
    for level in 0..cfg.levels {
        let res = cfg.resolution(level);
        let side = res + 1;
        let dense = side.pow(dim as u32) <= cfg.table_size;
        let mut acc = vec![0.0; f];
        for corner in 0..1usize << dim {
            let mut weight = 1.0;
            let mut coords = vec![0u32; dim];
            for i in 0..dim {
                let x = p[i] * res as f64;
                let lo = (x.floor() as usize).min(res - 1);
                let t = x - lo as f64;
                let up = (corner >> i) & 1 == 1;
                coords[i] = (lo + up as usize) as u32;
                weight *= if up { t } else { 1.0 - t };
            }
            let entry = if dense {
                coords.iter().rev().fold(0usize, |a, &c| a * side + c as usize)
            } else {
                hash_coords(&coords, cfg.table_size)
            };
            for (k, a) in acc.iter_mut().enumerate() {
                *a += weight * grid.table[(level_base + entry) * f + k];
            }
        }
        out.extend(acc);
        level_base += if dense { side.pow(dim as u32) } else { cfg.table_size };
    }
    out
}

#[test]
fn hash_grid_matches_lattice_oracle_in_3d_and_4d() {
    let mut r = rng(1);
    for (dim, base, finest) in [(4, 2, 6), (3, 2, 6), (3, 1, 3)] {
        let cfg = HashGridConfig {
            levels: 2,
            table_size: 1 << 6,
            features_per_entry: 2,
            base_resolution: base,
            finest_resolution: finest,
            dimensionality: dim,
        };
        let mut grid = HashGrid::new(cfg, &mut r).unwrap();
        for v in grid.table.iter_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        for _ in 0..500 {
            let p: Vec<f64> = (0..dim).map(|_| r.random::<f64>()).collect();
            let got = grid.lookup(&p);
            let want = lattice_oracle(&grid, &p);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "dim {dim}: {g} vs {w} at {p:?}");
            }
        }
    }
}

#[test]
fn hash_grid_table_gradient_matches_central_differences() {
    let mut r = rng(2);
    let cfg = HashGridConfig {
        levels: 2,
        table_size: 1 << 6,
        features_per_entry: 2,
        base_resolution: 2,
        finest_resolution: 6,
        dimensionality: 4,
    };
    let mut grid = HashGrid::new(cfg, &mut r).unwrap();
    let p = [0.31, 0.77, 0.52, 0.18];
    let up: Vec<f64> = (0..grid.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut g = vec![0.0; grid.table.len()];
    grid.lookup_backward(&p, &up, &mut g);
    let h = 1e-6;
    for i in 0..grid.table.len() {
        let orig = grid.table[i];
        grid.table[i] = orig + h;
        let a: f64 = grid.lookup(&p).iter().zip(&up).map(|(x, u)| x * u).sum();
        grid.table[i] = orig - h;
        let b: f64 = grid.lookup(&p).iter().zip(&up).map(|(x, u)| x * u).sum();
        grid.table[i] = orig;
        let numeric = (a - b) / (2.0 * h);
        assert!((numeric - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "entry {i}: {} vs {numeric}", g[i]);
    }
}

fn ray() -> Ray {
    Ray { origin: Vec3::zeros(), direction: Vec3::new(0.0, 0.0, 1.0), timestamp: 0.3, pixel: (0, 0), frame_index: 0 }
}

fn output(r: &mut ChaCha8Rng, shadow: bool) -> BranchOutput {
    BranchOutput {
        sigma: r.random_range(0.0..4.0),
        color: [r.random(), r.random(), r.random()],
        semantic_logits: vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), MASKED_LOGIT],
        shadow: if shadow { r.random() } else { 0.0 },
    }
}

#[test]
fn compositing_matches_term_by_term_quadrature() {
    let mut r = rng(3);
    for _ in 0..200 {
        let mut t: Vec<f64> = (0..8).map(|_| r.random_range(0.1..6.0)).collect();
        t.sort_by(f64::total_cmp);
        let far = 6.5;
        let samples = RaySamples::new(&ray(), t.clone(), far);
        let s: Vec<BranchOutput> = (0..8).map(|_| output(&mut r, false)).collect();
        let d: Vec<BranchOutput> = (0..8).map(|_| output(&mut r, true)).collect();
        let b = composite_outputs(&samples, &s, &d);

        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut opacity_d = 0.0;
        for i in 0..8 {
            let delta = if i < 7 { t[i + 1] - t[i] } else { far - t[7] };
            let mut tau = 0.0;
            for j in 0..i {
                let dj = t[j + 1] - t[j];
                tau += s[j].sigma * dj + d[j].sigma * dj;
            }
            let trans = (-tau).exp();
            let a_s = 1.0 - (-s[i].sigma * delta).exp();
            let a_d = 1.0 - (-d[i].sigma * delta).exp();
            for c in 0..3 {
                color[c] += trans * (a_s * (1.0 - d[i].shadow) * s[i].color[c] + a_d * d[i].color[c]);
            }
            depth += trans * (a_s + a_d) * t[i];
            opacity_d += trans * a_d;
        }
        for c in 0..3 {
            assert!((b.composed_color[c] - color[c]).abs() < 1e-12);
        }
        assert!((b.depth - depth).abs() < 1e-12);
        assert!((b.dynamic_opacity - opacity_d).abs() < 1e-12);
    }
}

#[test]
fn empty_dynamic_branch_reduces_to_single_field_rendering() {
    let mut r = rng(4);
    // Constant density along the whole ray: the rendered color approaches
    // c (1 - exp(-sigma L)) for every sample count.
    let (sigma, near, far) = (0.7, 0.5, 4.5);
    for k in [1, 3, 16, 64] {
        let t: Vec<f64> = (0..k).map(|i| near + (far - near) * i as f64 / k as f64).collect();
        let samples = RaySamples::new(&ray(), t, far);
        let c = [r.random(), r.random(), r.random()];
        let s: Vec<BranchOutput> = (0..k).map(|_| BranchOutput { sigma, color: c, semantic_logits: vec![0.0; 3], shadow: 0.0 }).collect();
        let d: Vec<BranchOutput> = (0..k).map(|_| BranchOutput { sigma: 0.0, ..output(&mut r, false) }).collect();
        let b = composite_outputs(&samples, &s, &d);
        let a = 1.0 - (-sigma * (far - near)).exp();
        for ch in 0..3 {
            assert!((b.composed_color[ch] - c[ch] * a).abs() < 1e-12);
            assert_eq!(b.composed_color[ch], b.static_color[ch]);
        }
        assert_eq!(b.dynamic_opacity, 0.0);
        assert!((b.final_transmittance - (1.0 - a)).abs() < 1e-12);
    }
}

/// SSIM of one window computed straight from its definition, with the
/// two-pass population moments.
fn ssim_formula(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx: f64 = x.iter().sum::<f64>() / n;
    let my: f64 = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
    let cs = (2.0 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2);
    l * cs
}

#[test]
fn ssim_matches_direct_formula() {
    let mut r = rng(5);
    for _ in 0..20 {
        let (w, h) = (r.random_range(8..20), r.random_range(10..20));
        let gt: Vec<[f64; 3]> = (0..w * h).map(|_| [r.random(), r.random(), r.random()]).collect();
        let pred: Vec<[f64; 3]> = gt.iter().map(|p| p.map(|v| (v + r.random_range(-0.2..0.2)).clamp(0.0, 1.0))).collect();
        let mask: Vec<bool> = (0..w * h).map(|i| i / w < h - 2 || r.random_bool(0.5)).collect();
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=h - 8 {
            for c0 in 0..=w - 8 {
                let idx: Vec<usize> = (r0..r0 + 8).flat_map(|rr| (c0..c0 + 8).map(move |cc| rr * w + cc)).collect();
                if !idx.iter().all(|&i| mask[i]) {
                    continue;
                }
                let per_channel: f64 = (0..3)
                    .map(|ch| {
                        let x: Vec<f64> = idx.iter().map(|&i| pred[i][ch]).collect();
                        let y: Vec<f64> = idx.iter().map(|&i| gt[i][ch]).collect();
                        ssim_formula(&x, &y)
                    })
                    .sum();
                total += per_channel / 3.0;
                count += 1;
            }
        }
        let got = ssim(&pred, &gt, w, h, Some(&mask)).unwrap();
        assert!((got - total / count as f64).abs() < 1e-9);
    }
}

#[test]
fn dssim_is_half_the_ssim_complement_on_a_full_patch() {
    let mut r = rng(6);
    for _ in 0..20 {
        let gt: Vec<[f64; 3]> = (0..64).map(|_| [r.random(), r.random(), r.random()]).collect();
        let pred: Vec<[f64; 3]> = (0..64).map(|_| [r.random(), r.random(), r.random()]).collect();
        let s = ssim(&pred, &gt, 8, 8, None).unwrap();
        assert!((dssim_patch(&pred, &gt) - (1.0 - s) / 2.0).abs() < 1e-12);
    }
    let binary: Vec<[f64; 3]> = (0..64).map(|i| [((i / 3) % 2) as f64; 3]).collect();
    let inverted: Vec<[f64; 3]> = binary.iter().map(|p| p.map(|v| 1.0 - v)).collect();
    assert!(ssim(&inverted, &binary, 8, 8, None).unwrap() < 0.0);
}

#[test]
fn adam_matches_a_hand_computed_scalar_trace() {
    let cfg = AdamConfig::default();
    let grads = [0.5, -1.0, 0.25, 2.0, 0.0, -0.75, 1e-3, 3.0, -2.0, 0.1];
    let lr = 0.01;
    let (mut p, mut m, mut v) = (vec![1.0], vec![0.0], vec![0.0]);
    let (mut rp, mut rm, mut rv) = (1.0f64, 0.0f64, 0.0f64);
    for (i, &g) in grads.iter().enumerate() {
        let t = i as i32 + 1;
        adam_step(&mut p, &[g], &mut m, &mut v, t as u64, lr, &cfg);
        rm = 0.9 * rm + 0.1 * g;
        rv = 0.999 * rv + 0.001 * g * g;
        let mhat = rm / (1.0 - 0.9f64.powi(t));
        let vhat = rv / (1.0 - 0.999f64.powi(t));
        rp -= lr * mhat / (vhat.sqrt() + 1e-15);
        assert!((p[0] - rp).abs() < 1e-12, "step {t}: {} vs {rp}", p[0]);
    }
}

fn frame(i: usize, r: &mut ChaCha8Rng) -> FrameMetrics {
    let counts = MaskCounts { tp: r.random_range(0..50), fp: r.random_range(0..50), fn_: r.random_range(0..50) };
    let s = counts.scores();
    FrameMetrics {
        frame: i,
        appearance_row: i,
        psnr_composed: r.random_range(15.0..35.0),
        ssim_composed: r.random(),
        psnr_static_masked: r.random_range(15.0..35.0),
        ssim_static_masked: Some(r.random()),
        recall: s.recall,
        iou: s.iou,
        f1: s.f1,
        dynamic_opacity_mean: r.random(),
        counts,
    }
}

#[test]
fn aggregate_ignores_frame_order() {
    let mut r = rng(7);
    let frames: Vec<FrameMetrics> = (0..9).map(|i| frame(i, &mut r)).collect();
    let base = aggregate("moving-box", Split::All, 0.5, frames.clone()).unwrap();
    for _ in 0..10 {
        let mut shuffled = frames.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        let other = aggregate("moving-box", Split::All, 0.5, shuffled).unwrap();
        for (a, b) in [
            (base.psnr_composed, other.psnr_composed),
            (base.ssim_static_masked, other.ssim_static_masked),
            (base.iou, other.iou),
            (base.dynamic_opacity_mean, other.dynamic_opacity_mean),
        ] {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(base.to_csv(), other.to_csv());
    }
}
