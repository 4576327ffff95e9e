//! The static and dynamic neural branches.
//!
//! Both branches share one layout: hash-grid features feed a trunk MLP whose
//! output drives a density head and a semantic head. The color head reads the
//! trunk output concatenated with the direction encoding (and, for the static
//! branch, the appearance code), so density and semantics are view- and
//! appearance-invariant by construction. The dynamic branch adds a shadow
//! head that reads the raw grid features only.
//!
//! Evaluation is batched over rows of an `N x 3` point matrix; every forward
//! returns a trace from which the exact backward pass is computed.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use ndarray::linalg::general_mat_mul;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{AppearanceTable, DirectionEncoding, HashGrid, HashGridConfig, APPEARANCE_DIM};
use crate::error::{Error, Result};
use crate::scene::{Aabb, Vec3};

/// Logit written into non-movable slots of the dynamic semantic head.
pub const MASKED_LOGIT: f64 = -30.0;

/// Initial bias of the density output, softplus(-1) ~ 0.31.
pub const DENSITY_BIAS_INIT: f64 = -1.0;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fully connected network: ReLU on hidden layers, identity on the output.
///
/// Parameters live in one flat vector; layer `l` stores its `in x out`
/// weight matrix (row-major) followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations retained by [`Mlp::forward`]: the input followed by every
/// layer's (post-activation) output.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    acts: Vec<Array2<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        let mut mlp = Mlp::zeros(dims);
        let mut off = 0;
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = w[0] * w[1] + w[1];
            for v in &mut mlp.params[off..off + n] {
                *v = rng.random_range(-bound..bound);
            }
            off += n;
        }
        mlp
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Mlp { dims: dims.to_vec(), params: vec![0.0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.dims[..=layer].windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let w = ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).unwrap();
        let b = ArrayView1::from(&self.params[off + i * o..off + i * o + o]);
        (w, b)
    }

    fn layer_grad<'a>(&self, grad: &'a mut [f64], layer: usize) -> (ArrayViewMut2<'a, f64>, ArrayViewMut1<'a, f64>) {
        let (i, o) = (self.dims[layer], self.dims[layer + 1]);
        let off = self.layer_offset(layer);
        let (w, b) = grad[off..off + i * o + o].split_at_mut(i * o);
        (ArrayViewMut2::from_shape((i, o), w).unwrap(), ArrayViewMut1::from(b))
    }

    /// Output-layer biases.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.num_layers() - 1;
        let off = self.layer_offset(l) + self.dims[l] * self.dims[l + 1];
        let o = self.output_dim();
        &mut self.params[off..off + o]
    }

    /// Zeroes the weights and biases of the output layer.
    pub fn zero_output_layer(&mut self) {
        let l = self.num_layers() - 1;
        let off = self.layer_offset(l);
        let n = self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        self.params[off..off + n].fill(0.0);
    }

    pub fn forward(&self, input: Array2<f64>) -> MlpTrace {
        assert_eq!(input.ncols(), self.input_dim(), "MLP input width mismatch");
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(input);
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            let a = &acts[l];
            let mut z = Array2::zeros((a.nrows(), w.ncols()));
            general_mat_mul(1.0, a, &w, 0.0, &mut z);
            z += &b;
            if l + 1 < self.num_layers() {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        MlpTrace { acts }
    }

    /// Accumulates parameter gradients into `grad_params` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: Array2<f64>, grad_params: &mut [f64]) -> Array2<f64> {
        assert_eq!(grad_params.len(), self.params.len());
        let mut g = grad_out;
        for l in (0..self.num_layers()).rev() {
            let (w, _) = self.layer(l);
            let a = &trace.acts[l];
            {
                let (mut gw, mut gb) = self.layer_grad(grad_params, l);
                general_mat_mul(1.0, &a.t(), &g, 1.0, &mut gw);
                gb += &g.sum_axis(Axis(0));
            }
            let mut gin = Array2::zeros((g.nrows(), w.nrows()));
            general_mat_mul(1.0, &g, &w.t(), 0.0, &mut gin);
            if l > 0 {
                ndarray::Zip::from(&mut gin).and(a).for_each(|gi, &ai| {
                    if ai <= 0.0 {
                        *gi = 0.0;
                    }
                });
            }
            g = gin;
        }
        g
    }
}

/// Architecture of both branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub static_grid: HashGridConfig,
    pub dynamic_grid: HashGridConfig,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub head_width: usize,
    pub direction_frequencies: usize,
    pub num_classes: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            static_grid: HashGridConfig::with_dim(3),
            dynamic_grid: HashGridConfig::with_dim(4),
            trunk_width: 64,
            trunk_layers: 2,
            head_width: 32,
            direction_frequencies: 4,
            num_classes: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.static_grid.validate()?;
        self.dynamic_grid.validate()?;
        if self.static_grid.dimensionality != 3 || self.dynamic_grid.dimensionality != 4 {
            return Err(Error::Config("static grid must be 3D and dynamic grid 4D".into()));
        }
        if self.trunk_width == 0 || self.trunk_layers == 0 || self.head_width == 0 {
            return Err(Error::Config("MLP widths and depth must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two semantic classes".into()));
        }
        Ok(())
    }

    fn trunk_dims(&self, input: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.trunk_width, self.trunk_layers));
        dims
    }
}

/// Per-sample branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub sigma: f64,
    pub color: [f64; 3],
    pub semantic_logits: Vec<f64>,
    /// Shadow ratio; always 0 for the static branch.
    pub shadow: f64,
}

/// Which semantic classes the dynamic branch may predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTableMask {
    pub movable: Vec<bool>,
}

impl ClassTableMask {
    pub fn new(movable: Vec<bool>) -> Result<Self> {
        if !movable.iter().any(|m| *m) {
            return Err(Error::Config("foreground mask would mask every class".into()));
        }
        if movable.iter().all(|m| *m) {
            return Err(Error::Config("foreground mask needs at least one non-movable class".into()));
        }
        Ok(ClassTableMask { movable })
    }
}

/// Replaces the logits of non-movable classes by [`MASKED_LOGIT`].
pub fn apply_foreground_mask(logits: &[f64], mask: &ClassTableMask) -> Result<Vec<f64>> {
    if logits.len() != mask.movable.len() {
        return Err(Error::Argument("logit count differs from class count".into()));
    }
    if !mask.movable.iter().any(|m| *m) {
        return Err(Error::Config("foreground mask would mask every class".into()));
    }
    Ok(logits
        .iter()
        .zip(&mask.movable)
        .map(|(&l, &m)| if m { l } else { MASKED_LOGIT })
        .collect())
}

/// Softmax with max subtraction.
pub fn pointwise_softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Softmax over the movable slots only: masked slots get probability exactly
/// 0, the limit [`MASKED_LOGIT`] stands for. A literal softmax would leave
/// the movable logits a gradient of order `exp(-30)` towards the masked
/// classes, which Adam rescales into full-size steps.
pub fn masked_softmax(logits: &[f64], movable: &[bool]) -> Vec<f64> {
    let mut out = logits.to_vec();
    masked_softmax_in_place(&mut out, movable);
    out
}

fn masked_softmax_in_place(v: &mut [f64], movable: &[bool]) {
    let m = v.iter().zip(movable).filter(|(_, &k)| k).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (x, &k) in v.iter_mut().zip(movable) {
        *x = if k { (*x - m).exp() } else { 0.0 };
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Struct-of-arrays branch outputs for `N` samples.
#[derive(Debug, Clone)]
pub struct BranchBatch {
    pub sigma: Vec<f64>,
    pub color: Array2<f64>,
    /// Post-mask logits for the dynamic branch.
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    /// Empty for the static branch.
    pub shadow: Vec<f64>,
}

impl BranchBatch {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn output(&self, i: usize) -> BranchOutput {
        BranchOutput {
            sigma: self.sigma[i],
            color: [self.color[[i, 0]], self.color[[i, 1]], self.color[[i, 2]]],
            semantic_logits: self.logits.row(i).to_vec(),
            shadow: self.shadow.get(i).copied().unwrap_or(0.0),
        }
    }
}

/// Upstream gradients on a [`BranchBatch`].
#[derive(Debug, Clone)]
pub struct BranchBatchGrad {
    pub sigma: Vec<f64>,
    pub color: Array2<f64>,
    pub probs: Array2<f64>,
    pub shadow: Vec<f64>,
}

impl BranchBatchGrad {
    pub fn zeros(n: usize, classes: usize, with_shadow: bool) -> Self {
        BranchBatchGrad {
            sigma: vec![0.0; n],
            color: Array2::zeros((n, 3)),
            probs: Array2::zeros((n, classes)),
            shadow: if with_shadow { vec![0.0; n] } else { Vec::new() },
        }
    }
}

fn positions_to_unit(points: ArrayView2<f64>, bounds: &Aabb) -> Array2<f64> {
    let mut out = points.to_owned();
    for mut row in out.outer_iter_mut() {
        for a in 0..3 {
            row[a] = (row[a] - bounds.min[a]) / bounds.extent(a);
        }
    }
    out
}

fn encode_directions(enc: &DirectionEncoding, dirs: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((dirs.nrows(), enc.output_dim()));
    let mut buf = Vec::with_capacity(enc.output_dim());
    for (d, mut o) in dirs.outer_iter().zip(out.outer_iter_mut()) {
        buf.clear();
        enc.encode_into(&[d[0], d[1], d[2]], &mut buf);
        o.assign(&ArrayView1::from(&buf[..]));
    }
    out
}

fn density_from_raw(raw: &Array2<f64>) -> Vec<f64> {
    raw.column(0).iter().map(|&r| softplus(r)).collect()
}

fn sigmoid_matrix(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(sigmoid)
}

fn softmax_rows(logits: &Array2<f64>, movable: Option<&[bool]>) -> Array2<f64> {
    let mut probs = logits.clone();
    for mut row in probs.outer_iter_mut() {
        let row = row.as_slice_mut().unwrap();
        match movable {
            Some(m) => masked_softmax_in_place(row, m),
            None => softmax_in_place(row),
        }
    }
    probs
}

fn density_raw_grad(trace: &MlpTrace, grad_sigma: &[f64]) -> Array2<f64> {
    let raw = trace.output();
    Array2::from_shape_fn((raw.nrows(), 1), |(i, _)| grad_sigma[i] * sigmoid(raw[[i, 0]]))
}

fn sigmoid_grad(out: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut g = grad.clone();
    ndarray::Zip::from(&mut g).and(out).for_each(|g, &y| *g *= y * (1.0 - y));
    g
}

/// Softmax adjoint; slots with `keep[k] == false` receive no gradient.
fn softmax_grad(probs: &Array2<f64>, grad: &Array2<f64>, keep: Option<&[bool]>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.outer_iter().zip(grad.outer_iter()).zip(out.outer_iter_mut()) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for k in 0..p.len() {
            o[k] = p[k] * (g[k] - dot);
        }
        if let Some(keep) = keep {
            for (k, &kk) in keep.iter().enumerate() {
                if !kk {
                    o[k] = 0.0;
                }
            }
        }
    }
    out
}

/// Static branch: `(sigma, c, s) = F(H(x), gamma(d), l_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticField {
    pub bounds: Aabb,
    pub grid: HashGrid,
    pub trunk: Mlp,
    pub density: Mlp,
    pub semantic: Mlp,
    pub color: Mlp,
    pub appearance: AppearanceTable,
    pub directions: DirectionEncoding,
}

/// Retained intermediates of a static forward pass.
#[derive(Debug, Clone)]
pub struct StaticTrace {
    unit_points: Array2<f64>,
    trunk: MlpTrace,
    density: MlpTrace,
    semantic: MlpTrace,
    color: MlpTrace,
    appearance_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticGrads {
    pub grid: Vec<f64>,
    pub trunk: Vec<f64>,
    pub density: Vec<f64>,
    pub semantic: Vec<f64>,
    pub color: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl StaticField {
    pub fn new(config: &FieldConfig, bounds: Aabb, appearance_rows: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let grid = HashGrid::new(config.static_grid.clone(), rng)?;
        let directions = DirectionEncoding { num_frequencies: config.direction_frequencies };
        let w = config.trunk_width;
        let trunk = Mlp::new(&config.trunk_dims(grid.output_dim()), rng);
        let mut density = Mlp::new(&[w, config.head_width, 1], rng);
        density.output_bias_mut()[0] = DENSITY_BIAS_INIT;
        let semantic = Mlp::new(&[w, config.head_width, config.num_classes], rng);
        let color = Mlp::new(&[w + directions.output_dim() + APPEARANCE_DIM, config.head_width, 3], rng);
        let appearance = AppearanceTable::new(appearance_rows, rng);
        Ok(StaticField { bounds, grid, trunk, density, semantic, color, appearance, directions })
    }

    pub fn zero_grads(&self) -> StaticGrads {
        StaticGrads {
            grid: vec![0.0; self.grid.table.len()],
            trunk: vec![0.0; self.trunk.params.len()],
            density: vec![0.0; self.density.params.len()],
            semantic: vec![0.0; self.semantic.params.len()],
            color: vec![0.0; self.color.params.len()],
            appearance: vec![0.0; self.appearance.embeddings.len()],
        }
    }

    /// Evaluates world-space `points` (`N x 3`) seen along unit `directions`
    /// (`N x 3`) with appearance code `appearance_rows[i]`.
    pub fn forward_batch(
        &self,
        points: ArrayView2<f64>,
        directions: ArrayView2<f64>,
        appearance_rows: &[usize],
    ) -> (BranchBatch, StaticTrace) {
        let n = points.nrows();
        assert_eq!(directions.nrows(), n);
        assert_eq!(appearance_rows.len(), n);
        let unit_points = positions_to_unit(points, &self.bounds);
        let features = self.grid.lookup_batch(unit_points.view());
        let trunk = self.trunk.forward(features);
        let h = trunk.output();
        let density = self.density.forward(h.clone());
        let semantic = self.semantic.forward(h.clone());

        let dir_enc = encode_directions(&self.directions, directions);
        let w = h.ncols();
        let mut color_in = Array2::zeros((n, self.color.input_dim()));
        color_in.slice_mut(s![.., ..w]).assign(h);
        color_in.slice_mut(s![.., w..w + dir_enc.ncols()]).assign(&dir_enc);
        for (i, &r) in appearance_rows.iter().enumerate() {
            color_in
                .slice_mut(s![i, w + dir_enc.ncols()..])
                .assign(&ArrayView1::from(self.appearance.row(r)));
        }
        let color = self.color.forward(color_in);

        let batch = BranchBatch {
            sigma: density_from_raw(density.output()),
            color: sigmoid_matrix(color.output()),
            logits: semantic.output().clone(),
            probs: softmax_rows(semantic.output(), None),
            shadow: Vec::new(),
        };
        let trace = StaticTrace {
            unit_points,
            trunk,
            density,
            semantic,
            color,
            appearance_rows: appearance_rows.to_vec(),
        };
        (batch, trace)
    }

    pub fn backward_batch(&self, trace: &StaticTrace, out: &BranchBatch, grad: &BranchBatchGrad, grads: &mut StaticGrads) {
        let w = self.trunk.output_dim();
        let g_density = density_raw_grad(&trace.density, &grad.sigma);
        let mut g_h = self.density.backward(&trace.density, g_density, &mut grads.density);

        let g_logits = softmax_grad(&out.probs, &grad.probs, None);
        g_h += &self.semantic.backward(&trace.semantic, g_logits, &mut grads.semantic);

        let g_color = sigmoid_grad(&out.color, &grad.color);
        let g_color_in = self.color.backward(&trace.color, g_color, &mut grads.color);
        g_h += &g_color_in.slice(s![.., ..w]);
        let app0 = w + self.directions.output_dim();
        for (i, &r) in trace.appearance_rows.iter().enumerate() {
            let dst = &mut grads.appearance[r * APPEARANCE_DIM..(r + 1) * APPEARANCE_DIM];
            for (k, v) in dst.iter_mut().enumerate() {
                *v += g_color_in[[i, app0 + k]];
            }
        }

        let g_feat = self.trunk.backward(&trace.trunk, g_h, &mut grads.trunk);
        self.grid.backward_batch(trace.unit_points.view(), g_feat.view(), &mut grads.grid);
    }

    /// Densities only, for the coarse sampling pass.
    pub fn sigma_batch(&self, points: ArrayView2<f64>) -> Vec<f64> {
        let features = self.grid.lookup_batch(positions_to_unit(points, &self.bounds).view());
        let h = self.trunk.forward(features);
        density_from_raw(self.density.forward(h.output().clone()).output())
    }

    /// Single-sample evaluation at world point `x`.
    pub fn forward(&self, x: &Vec3, d: &Vec3, appearance_row: usize) -> BranchOutput {
        let p = Array2::from_shape_vec((1, 3), vec![x.x, x.y, x.z]).unwrap();
        let dir = Array2::from_shape_vec((1, 3), vec![d.x, d.y, d.z]).unwrap();
        self.forward_batch(p.view(), dir.view(), &[appearance_row]).0.output(0)
    }
}

/// Dynamic branch: `(sigma, c, s) = F(H(x, t), gamma(d))`, `rho = F_rho(H(x, t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicField {
    pub bounds: Aabb,
    pub grid: HashGrid,
    pub trunk: Mlp,
    pub density: Mlp,
    pub semantic: Mlp,
    pub color: Mlp,
    pub shadow: Mlp,
    pub directions: DirectionEncoding,
    /// `None` disables the foreground-only mask.
    pub mask: Option<ClassTableMask>,
}

#[derive(Debug, Clone)]
pub struct DynamicTrace {
    unit_points: Array2<f64>,
    trunk: MlpTrace,
    density: MlpTrace,
    semantic: MlpTrace,
    color: MlpTrace,
    shadow: MlpTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGrads {
    pub grid: Vec<f64>,
    pub trunk: Vec<f64>,
    pub density: Vec<f64>,
    pub semantic: Vec<f64>,
    pub color: Vec<f64>,
    pub shadow: Vec<f64>,
}

impl DynamicField {
    pub fn new(config: &FieldConfig, bounds: Aabb, mask: Option<ClassTableMask>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &mask {
            if m.movable.len() != config.num_classes {
                return Err(Error::Config("foreground mask length differs from class count".into()));
            }
        }
        let grid = HashGrid::new(config.dynamic_grid.clone(), rng)?;
        let directions = DirectionEncoding { num_frequencies: config.direction_frequencies };
        let w = config.trunk_width;
        let trunk = Mlp::new(&config.trunk_dims(grid.output_dim()), rng);
        let mut density = Mlp::new(&[w, config.head_width, 1], rng);
        density.output_bias_mut()[0] = DENSITY_BIAS_INIT;
        let semantic = Mlp::new(&[w, config.head_width, config.num_classes], rng);
        let color = Mlp::new(&[w + directions.output_dim(), config.head_width, 3], rng);
        let shadow = Mlp::new(&[grid.output_dim(), config.head_width, 1], rng);
        Ok(DynamicField { bounds, grid, trunk, density, semantic, color, shadow, directions, mask })
    }

    pub fn zero_grads(&self) -> DynamicGrads {
        DynamicGrads {
            grid: vec![0.0; self.grid.table.len()],
            trunk: vec![0.0; self.trunk.params.len()],
            density: vec![0.0; self.density.params.len()],
            semantic: vec![0.0; self.semantic.params.len()],
            color: vec![0.0; self.color.params.len()],
            shadow: vec![0.0; self.shadow.params.len()],
        }
    }

    /// Evaluates world-space `points` at normalized times `times`.
    pub fn forward_batch(
        &self,
        points: ArrayView2<f64>,
        directions: ArrayView2<f64>,
        times: &[f64],
    ) -> (BranchBatch, DynamicTrace) {
        let n = points.nrows();
        assert_eq!(directions.nrows(), n);
        assert_eq!(times.len(), n);
        let unit_points = self.unit_points(points, times);
        let features = self.grid.lookup_batch(unit_points.view());
        let shadow = self.shadow.forward(features.clone());
        let trunk = self.trunk.forward(features);
        let h = trunk.output();
        let density = self.density.forward(h.clone());
        let semantic = self.semantic.forward(h.clone());

        let dir_enc = encode_directions(&self.directions, directions);
        let w = h.ncols();
        let mut color_in = Array2::zeros((n, self.color.input_dim()));
        color_in.slice_mut(s![.., ..w]).assign(h);
        color_in.slice_mut(s![.., w..]).assign(&dir_enc);
        let color = self.color.forward(color_in);

        let mut logits = semantic.output().clone();
        if let Some(mask) = &self.mask {
            for mut row in logits.outer_iter_mut() {
                for (k, &m) in mask.movable.iter().enumerate() {
                    if !m {
                        row[k] = MASKED_LOGIT;
                    }
                }
            }
        }
        let batch = BranchBatch {
            sigma: density_from_raw(density.output()),
            color: sigmoid_matrix(color.output()),
            probs: softmax_rows(&logits, self.mask.as_ref().map(|m| m.movable.as_slice())),
            logits,
            shadow: shadow.output().column(0).iter().map(|&z| sigmoid(z)).collect(),
        };
        let trace = DynamicTrace { unit_points, trunk, density, semantic, color, shadow };
        (batch, trace)
    }

    pub fn backward_batch(&self, trace: &DynamicTrace, out: &BranchBatch, grad: &BranchBatchGrad, grads: &mut DynamicGrads) {
        let w = self.trunk.output_dim();
        let g_density = density_raw_grad(&trace.density, &grad.sigma);
        let mut g_h = self.density.backward(&trace.density, g_density, &mut grads.density);

        let keep = self.mask.as_ref().map(|m| m.movable.as_slice());
        let g_logits = softmax_grad(&out.probs, &grad.probs, keep);
        g_h += &self.semantic.backward(&trace.semantic, g_logits, &mut grads.semantic);

        let g_color = sigmoid_grad(&out.color, &grad.color);
        let g_color_in = self.color.backward(&trace.color, g_color, &mut grads.color);
        g_h += &g_color_in.slice(s![.., ..w]);

        let mut g_feat = self.trunk.backward(&trace.trunk, g_h, &mut grads.trunk);

        let g_shadow = Array2::from_shape_fn((out.len(), 1), |(i, _)| {
            let r = out.shadow[i];
            grad.shadow[i] * r * (1.0 - r)
        });
        g_feat += &self.shadow.backward(&trace.shadow, g_shadow, &mut grads.shadow);
        self.grid.backward_batch(trace.unit_points.view(), g_feat.view(), &mut grads.grid);
    }

    /// Densities only, for the coarse sampling pass.
    pub fn sigma_batch(&self, points: ArrayView2<f64>, times: &[f64]) -> Vec<f64> {
        let features = self.grid.lookup_batch(self.unit_points(points, times).view());
        let h = self.trunk.forward(features);
        density_from_raw(self.density.forward(h.output().clone()).output())
    }

    fn unit_points(&self, points: ArrayView2<f64>, times: &[f64]) -> Array2<f64> {
        let spatial = positions_to_unit(points, &self.bounds);
        let mut unit = Array2::zeros((points.nrows(), 4));
        unit.slice_mut(s![.., ..3]).assign(&spatial);
        for (i, &t) in times.iter().enumerate() {
            unit[[i, 3]] = t;
        }
        unit
    }

    pub fn forward(&self, x: &Vec3, t: f64, d: &Vec3) -> BranchOutput {
        let p = Array2::from_shape_vec((1, 3), vec![x.x, x.y, x.z]).unwrap();
        let dir = Array2::from_shape_vec((1, 3), vec![d.x, d.y, d.z]).unwrap();
        self.forward_batch(p.view(), dir.view(), &[t]).0.output(0)
    }
}
