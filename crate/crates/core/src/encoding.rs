//! Trainable input encodings: multi-resolution hash grids (3D static, 4D
//! dynamic), the sinusoidal direction encoding and the per-frame appearance
//! table.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial hash primes for dimensions 0..4.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Dimension of the per-frame appearance embedding.
pub const APPEARANCE_DIM: usize = 16;

const MAX_DIM: usize = 4;

/// Hashes integer lattice coordinates into `[0, table_size)`.
///
/// Each coordinate is multiplied by its prime with 32-bit wrapping
/// arithmetic, the products are XOR-ed, and the result is reduced modulo the
/// table size.
pub fn hash_coords(coords: &[u32], table_size: usize) -> usize {
    let mut h = 0u32;
    for (c, p) in coords.iter().zip(HASH_PRIMES) {
        h ^= c.wrapping_mul(p);
    }
    h as usize % table_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Entries per level.
    pub table_size: usize,
    pub features_per_entry: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
    pub dimensionality: usize,
}

impl HashGridConfig {
    pub fn with_dim(dimensionality: usize) -> Self {
        HashGridConfig {
            levels: 16,
            table_size: 1 << 19,
            features_per_entry: 2,
            base_resolution: 16,
            finest_resolution: 2048,
            dimensionality,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=MAX_DIM).contains(&self.dimensionality) {
            return Err(Error::Config(format!("grid dimensionality {} not in 3..=4", self.dimensionality)));
        }
        if self.levels == 0 || self.table_size == 0 || self.features_per_entry == 0 {
            return Err(Error::Config("grid levels, table size and features must be positive".into()));
        }
        if self.base_resolution == 0 || self.finest_resolution < self.base_resolution {
            return Err(Error::Config(format!(
                "grid resolutions must satisfy finest ({}) >= base ({}) >= 1",
                self.finest_resolution, self.base_resolution
            )));
        }
        if self.table_size > u32::MAX as usize {
            return Err(Error::Config("table size must fit in 32 bits".into()));
        }
        Ok(())
    }

    /// Per-level scale factor of the geometric resolution schedule.
    pub fn growth(&self) -> f64 {
        if self.levels == 1 {
            return 1.0;
        }
        ((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (self.levels - 1) as f64
    }

    pub fn resolution(&self, level: usize) -> usize {
        let r = self.base_resolution as f64 * (self.growth() * level as f64).exp();
        // absorb round-off so that the last level lands exactly on `finest`
        (r + 1e-9 * r).floor() as usize
    }

    /// Whether the level's full lattice fits in the table without hashing.
    pub fn level_is_dense(&self, level: usize) -> bool {
        let side = self.resolution(level) as u128 + 1;
        side.pow(self.dimensionality as u32) <= self.table_size as u128
    }

    pub fn level_entries(&self, level: usize) -> usize {
        if self.level_is_dense(level) {
            (self.resolution(level) + 1).pow(self.dimensionality as u32)
        } else {
            self.table_size
        }
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_entry
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.levels).map(|l| self.level_entries(l)).sum::<usize>() * self.features_per_entry
    }
}

/// One lattice corner touched by a lookup.
#[derive(Debug, Clone, Copy)]
struct Corner {
    entry: usize,
    weight: f64,
    bits: u32,
}

/// Multi-resolution hashed feature lattice.
#[derive(Debug)]
pub struct HashGrid {
    pub config: HashGridConfig,
    /// Entry offset of each level into `table` (in entries, not scalars).
    offsets: Vec<usize>,
    /// Cached per-level lattice resolution and whether the level is dense.
    levels: Vec<(usize, bool)>,
    pub table: Vec<f64>,
    clamped: AtomicU64,
}

impl Clone for HashGrid {
    fn clone(&self) -> Self {
        HashGrid {
            config: self.config.clone(),
            offsets: self.offsets.clone(),
            levels: self.levels.clone(),
            table: self.table.clone(),
            clamped: AtomicU64::new(self.clamped.load(Ordering::Relaxed)),
        }
    }
}

impl PartialEq for HashGrid {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.table == other.table
    }
}

impl HashGrid {
    /// Table entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut grid = HashGrid::zeros(config)?;
        for v in grid.table.iter_mut() {
            *v = rng.random_range(-1e-4..1e-4);
        }
        Ok(grid)
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut offsets = Vec::with_capacity(config.levels);
        let mut total = 0;
        for l in 0..config.levels {
            offsets.push(total);
            total += config.level_entries(l);
        }
        let levels = (0..config.levels).map(|l| (config.resolution(l), config.level_is_dense(l))).collect();
        Ok(HashGrid {
            table: vec![0.0; total * config.features_per_entry],
            offsets,
            levels,
            config,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Number of lookups whose input had to be clamped into `[0,1]^dim`.
    pub fn clamp_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }

    /// Scalar offset of the first feature of `entry` within level `level`.
    pub fn entry_offset(&self, level: usize, entry: usize) -> usize {
        (self.offsets[level] + entry) * self.config.features_per_entry
    }

    fn clamp_point(&self, point: &[f64]) -> ([f64; MAX_DIM], [bool; MAX_DIM]) {
        let mut p = [0.0; MAX_DIM];
        let mut inside = [true; MAX_DIM];
        let mut any = false;
        for (i, &x) in point.iter().enumerate() {
            if x.is_nan() || !(0.0..=1.0).contains(&x) {
                inside[i] = false;
                any = true;
                p[i] = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
            } else {
                p[i] = x;
            }
        }
        if any {
            self.clamped.fetch_add(1, Ordering::Relaxed);
        }
        (p, inside)
    }

    /// Corners of the enclosing cell at `level` and their interpolation
    /// weights; also returns the in-cell fractions.
    fn corners(&self, level: usize, p: &[f64; MAX_DIM], out: &mut [Corner; 1 << MAX_DIM]) -> [f64; MAX_DIM] {
        let dim = self.config.dimensionality;
        let (res, dense) = self.levels[level];
        let side = res + 1;
        let mut frac = [0.0; MAX_DIM];
        // per-axis weights and entry contributions of the lower/upper corner
        let mut w = [[0.0; 2]; MAX_DIM];
        let mut part = [[0usize; 2]; MAX_DIM];
        let mut stride = 1usize;
        for i in 0..dim {
            let pos = p[i] * res as f64;
            let c = (pos.floor() as usize).min(res - 1);
            frac[i] = pos - c as f64;
            w[i] = [1.0 - frac[i], frac[i]];
            if dense {
                part[i] = [c * stride, (c + 1) * stride];
                stride *= side;
            } else {
                let prime = HASH_PRIMES[i];
                part[i] = [(c as u32).wrapping_mul(prime) as usize, (c as u32 + 1).wrapping_mul(prime) as usize];
            }
        }
        let mask = self.config.table_size - 1;
        let pow2 = self.config.table_size.is_power_of_two();
        for (bits, corner) in out.iter_mut().enumerate().take(1 << dim) {
            let mut weight = 1.0;
            let mut entry = 0usize;
            for i in 0..dim {
                let b = (bits >> i) & 1;
                weight *= w[i][b];
                if dense {
                    entry += part[i][b];
                } else {
                    entry ^= part[i][b];
                }
            }
            if !dense {
                entry = if pow2 { entry & mask } else { entry % self.config.table_size };
            }
            *corner = Corner { entry, weight, bits: bits as u32 };
        }
        frac
    }

    /// Interpolated features of `point`, concatenated over levels.
    pub fn lookup(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.lookup_into(point, &mut out);
        out
    }

    pub fn lookup_into(&self, point: &[f64], out: &mut [f64]) {
        assert_eq!(point.len(), self.config.dimensionality, "point dimensionality mismatch");
        let f = self.config.features_per_entry;
        let (p, _) = self.clamp_point(point);
        let mut corners = [Corner { entry: 0, weight: 0.0, bits: 0 }; 1 << MAX_DIM];
        let n = 1 << self.config.dimensionality;
        for level in 0..self.config.levels {
            self.corners(level, &p, &mut corners);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(0.0);
            for c in &corners[..n] {
                let src = self.entry_offset(level, c.entry);
                for k in 0..f {
                    dst[k] += c.weight * self.table[src + k];
                }
            }
        }
    }

    /// Adjoint of [`lookup`](Self::lookup): scatters `upstream` into
    /// `table_grad` (same layout as `table`) and returns the gradient with
    /// respect to the point. Clamped coordinates get zero gradient.
    pub fn lookup_backward(&self, point: &[f64], upstream: &[f64], table_grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(point.len(), self.config.dimensionality, "point dimensionality mismatch");
        assert_eq!(table_grad.len(), self.table.len());
        let dim = self.config.dimensionality;
        let f = self.config.features_per_entry;
        let (p, inside) = self.clamp_point(point);
        let mut corners = [Corner { entry: 0, weight: 0.0, bits: 0 }; 1 << MAX_DIM];
        let mut grad_point = vec![0.0; dim];
        for level in 0..self.config.levels {
            let frac = self.corners(level, &p, &mut corners);
            let res = self.levels[level].0 as f64;
            let up = &upstream[level * f..(level + 1) * f];
            for c in &corners[..1 << dim] {
                let dst = self.entry_offset(level, c.entry);
                let mut dot = 0.0;
                for k in 0..f {
                    table_grad[dst + k] += c.weight * up[k];
                    dot += up[k] * self.table[dst + k];
                }
                for i in 0..dim {
                    let mut dw = if (c.bits >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    for j in 0..dim {
                        if j != i {
                            dw *= if (c.bits >> j) & 1 == 1 { frac[j] } else { 1.0 - frac[j] };
                        }
                    }
                    grad_point[i] += dot * dw * res;
                }
            }
        }
        for i in 0..dim {
            if !inside[i] {
                grad_point[i] = 0.0;
            }
        }
        grad_point
    }

    /// Row-wise [`lookup`](Self::lookup) over an `N x dim` matrix.
    pub fn lookup_batch(&self, points: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((points.nrows(), self.output_dim()));
        for (p, mut o) in points.outer_iter().zip(out.outer_iter_mut()) {
            let p = p.to_slice().expect("contiguous point rows");
            self.lookup_into(p, o.as_slice_mut().expect("contiguous output rows"));
        }
        out
    }

    /// Row-wise table adjoint, accumulated in row order. Unlike
    /// [`lookup_backward`](Self::lookup_backward) it skips the point gradient.
    pub fn backward_batch(&self, points: ArrayView2<f64>, upstream: ArrayView2<f64>, table_grad: &mut [f64]) {
        assert_eq!(table_grad.len(), self.table.len());
        let f = self.config.features_per_entry;
        let n = 1 << self.config.dimensionality;
        let mut corners = [Corner { entry: 0, weight: 0.0, bits: 0 }; 1 << MAX_DIM];
        let mut row = vec![0.0; self.output_dim()];
        for (p, u) in points.outer_iter().zip(upstream.outer_iter()) {
            let (p, _) = self.clamp_point(p.to_slice().expect("contiguous point rows"));
            let u = match u.to_slice() {
                Some(u) => u,
                None => {
                    row.iter_mut().zip(u.iter()).for_each(|(d, s)| *d = *s);
                    &row
                }
            };
            for level in 0..self.config.levels {
                self.corners(level, &p, &mut corners);
                let up = &u[level * f..(level + 1) * f];
                for c in &corners[..n] {
                    let dst = self.entry_offset(level, c.entry);
                    for k in 0..f {
                        table_grad[dst + k] += c.weight * up[k];
                    }
                }
            }
        }
    }
}

/// Sinusoidal encoding of unit view directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionEncoding {
    pub num_frequencies: usize,
}

impl Default for DirectionEncoding {
    fn default() -> Self {
        DirectionEncoding { num_frequencies: 4 }
    }
}

impl DirectionEncoding {
    pub fn output_dim(&self) -> usize {
        3 * 2 * self.num_frequencies
    }

    /// `[sin(2^k pi d_i), cos(2^k pi d_i)]` for k ascending, then axis.
    pub fn encode(&self, d: &[f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim());
        self.encode_into(d, &mut out);
        out
    }

    pub fn encode_into(&self, d: &[f64; 3], out: &mut Vec<f64>) {
        for k in 0..self.num_frequencies {
            let scale = (1u64 << k) as f64 * std::f64::consts::PI;
            for &x in d {
                let (s, c) = (scale * x).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
    }
}

/// Per-frame latent appearance codes, one row per training frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceTable {
    pub rows: usize,
    pub embeddings: Vec<f64>,
}

impl AppearanceTable {
    pub fn new(rows: usize, rng: &mut impl Rng) -> Self {
        let embeddings = (0..rows * APPEARANCE_DIM).map(|_| rng.random_range(-0.05..0.05)).collect();
        AppearanceTable { rows, embeddings }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.embeddings[i * APPEARANCE_DIM..(i + 1) * APPEARANCE_DIM]
    }
}
