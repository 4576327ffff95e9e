//! Procedural dynamic scenes with exact ground truth.
//!
//! Every bundled scene lives inside [`SCENE_BOUNDS`]: a ground plane labelled
//! `road`, a handful of static boxes and spheres labelled `background`, and
//! zero or more vehicles that translate rigidly from frame to frame. Vehicles
//! may drag a dark disc along the ground that stands in for a cast shadow.
//! Rasterization is analytic ray casting, so the colour, depth, semantic and
//! motion images are exact.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Substream};

pub type Vec3 = Vector3<f64>;

/// Side length of a training patch.
pub const PATCH_SIZE: usize = 15;

/// Factor applied to ground colour inside a cast-shadow disc.
pub const SHADOW_FACTOR: f64 = 0.4;

/// Names of the bundled scenes.
pub const SCENE_NAMES: [&str; 4] = ["moving-box", "two-cars", "shadow-caster", "static-only"];

pub const CLASS_SKY: usize = 0;
pub const CLASS_ROAD: usize = 1;
pub const CLASS_BACKGROUND: usize = 2;
pub const CLASS_VEHICLE: usize = 3;

const HIT_EPS: f64 = 1e-9;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// All geometry of every bundled scene is inside this box.
pub const SCENE_BOUNDS: Aabb = Aabb {
    min: [-4.0, -4.0, -4.0],
    max: [4.0, 4.0, 4.0],
};

impl Aabb {
    pub fn extent(&self, axis: usize) -> f64 {
        self.max[axis] - self.min[axis]
    }

    pub fn diagonal(&self) -> f64 {
        (0..3).map(|a| self.extent(a).powi(2)).sum::<f64>().sqrt()
    }

    /// Maps a world point to normalized `[0,1]^3` box coordinates (unclamped).
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.min[a]) / self.extent(a))
    }

    /// Parametric entry and exit distances of a ray, if it touches the box.
    pub fn ray_interval(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut lo, mut hi) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t1 > 0.0).then_some((t0, t1))
    }
}

/// Pinhole camera. `orientation` maps camera axes (x right, y down, z
/// forward) to world axes: its columns are the world-space right, down and
/// forward vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub orientation: Matrix3<f64>,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn look_at(position: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let forward = (target - position).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        let camera = Camera {
            position,
            orientation: Matrix3::from_columns(&[right, down, forward]),
            focal,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    pub fn validate(&self) -> Result<()> {
        let gram = self.orientation.transpose() * self.orientation;
        if (gram - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(Error::Config("camera orientation is not orthonormal".into()));
        }
        if !(self.focal > 0.0) {
            return Err(Error::Config(format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width < PATCH_SIZE || self.height < PATCH_SIZE {
            return Err(Error::Config(format!(
                "resolution {}x{} is below the {PATCH_SIZE}x{PATCH_SIZE} patch size",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vec3 {
        self.orientation.column(2).into_owned()
    }

    /// Unit direction through continuous image coordinates `(u, v)`, where
    /// `(0, 0)` is the top-left image corner and pixel `(r, c)` has its
    /// center at `(c + 0.5, r + 0.5)`.
    pub fn direction_at(&self, u: f64, v: f64) -> Vec3 {
        let cam = Vec3::new(
            (u - self.width as f64 / 2.0) / self.focal,
            (v - self.height as f64 / 2.0) / self.focal,
            1.0,
        );
        (self.orientation * cam).normalize()
    }
}

/// A camera ray for one pixel of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub timestamp: f64,
    pub pixel: (usize, usize),
    pub frame_index: usize,
}

/// Builds the ray through the center of pixel `(row, col)`.
pub fn generate_ray(camera: &Camera, row: usize, col: usize, timestamp: f64) -> Result<Ray> {
    generate_frame_ray(camera, row, col, timestamp, 0)
}

pub fn generate_frame_ray(camera: &Camera, row: usize, col: usize, timestamp: f64, frame_index: usize) -> Result<Ray> {
    if row >= camera.height || col >= camera.width {
        return Err(Error::Argument(format!(
            "pixel ({row}, {col}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    Ok(Ray {
        origin: camera.position,
        direction: camera.direction_at(col as f64 + 0.5, row as f64 + 0.5),
        timestamp,
        pixel: (row, col),
        frame_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub name: String,
    pub movable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<SemanticClass>,
}

impl ClassTable {
    pub fn standard() -> Self {
        let class = |name: &str, movable| SemanticClass { name: name.into(), movable };
        ClassTable {
            classes: vec![
                class("sky", false),
                class("road", false),
                class("background", false),
                class("vehicle", true),
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn movable(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.movable).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
}

impl Shape {
    /// Nearest positive hit of a ray against the shape centered at `center`,
    /// with the outward surface normal.
    pub fn intersect(&self, center: &Vec3, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Box { half_extents } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                let mut axis = 0;
                for a in 0..3 {
                    let lo = center[a] - half_extents[a];
                    let hi = center[a] + half_extents[a];
                    if dir[a].abs() < 1e-300 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let (mut t0, mut t1) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    if t0 > t_near {
                        t_near = t0;
                        axis = a;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= HIT_EPS {
                    return None;
                }
                let mut normal = Vec3::zeros();
                normal[axis] = -dir[axis].signum();
                Some((t_near, normal))
            }
            Shape::Sphere { radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let t = -b - disc.sqrt();
                if t <= HIT_EPS {
                    return None;
                }
                let normal = (origin + dir * t - center) / radius;
                Some((t, normal))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticPrimitive {
    pub shape: Shape,
    pub center: Vec3,
    pub color: [f64; 3],
    pub class: usize,
}

/// Dark disc on the ground plane that follows a dynamic primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowDisc {
    /// Offset of the disc center from the primitive center, in (x, z).
    pub offset: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicPrimitive {
    pub shape: Shape,
    pub color: [f64; 3],
    pub class: usize,
    /// Center of the primitive in every frame.
    pub trajectory: Vec<Vec3>,
    pub shadow: Option<ShadowDisc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub name: String,
    pub seed: u64,
    pub bounds: Aabb,
    pub static_primitives: Vec<StaticPrimitive>,
    pub dynamic_primitives: Vec<DynamicPrimitive>,
    pub ground_height: f64,
    pub ground_class: usize,
    pub sky_color: [f64; 3],
    pub frames: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub class_table: ClassTable,
}

/// Resolution and length of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneOptions {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        SceneOptions { frames: 8, width: 48, height: 48 }
    }
}

/// Generates a bundled scene with the default options.
pub fn generate_scene(spec_name: &str, seed: u64) -> Result<SyntheticScene> {
    generate_scene_with(spec_name, seed, &SceneOptions::default())
}

pub fn generate_scene_with(spec_name: &str, seed: u64, options: &SceneOptions) -> Result<SyntheticScene> {
    if !SCENE_NAMES.contains(&spec_name) {
        return Err(Error::Config(format!(
            "unknown scene `{spec_name}` (expected one of {})",
            SCENE_NAMES.join(", ")
        )));
    }
    if options.frames == 0 {
        return Err(Error::Config("a scene needs at least one frame".into()));
    }
    let mut rng = rng::stream(seed, Substream::Scene, 0);
    let mut jitter = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;

    let tint = |base: [f64; 3], j: &mut dyn FnMut(f64) -> f64| base.map(|c| (c + j(0.04)).clamp(0.0, 1.0));

    let building = |center: [f64; 3], half: [f64; 3], color: [f64; 3]| StaticPrimitive {
        shape: Shape::Box { half_extents: half },
        center: Vec3::from(center),
        color,
        class: CLASS_BACKGROUND,
    };
    let static_primitives = vec![
        building(
            [-2.4 + jitter(0.2), 1.1, 3.3],
            [1.0, 1.1 + jitter(0.2), 0.6],
            tint([0.78, 0.66, 0.50], &mut jitter),
        ),
        building(
            [0.6 + jitter(0.2), 1.5, 3.4],
            [1.1, 1.5 + jitter(0.2), 0.5],
            tint([0.50, 0.60, 0.74], &mut jitter),
        ),
        building(
            [3.2, 0.8, 0.9 + jitter(0.2)],
            [0.6, 0.8 + jitter(0.1), 1.4],
            tint([0.62, 0.72, 0.46], &mut jitter),
        ),
        StaticPrimitive {
            shape: Shape::Sphere { radius: 0.7 + jitter(0.05) },
            center: Vec3::new(-3.1, 0.9, 0.7 + jitter(0.2)),
            color: tint([0.24, 0.55, 0.26], &mut jitter),
            class: CLASS_BACKGROUND,
        },
    ];

    let n = options.frames;
    let progress = |f: usize| if n > 1 { f as f64 / (n - 1) as f64 } else { 0.0 };
    let vehicle = |from: f64, to: f64, z: f64, color: [f64; 3], shadow: Option<ShadowDisc>| DynamicPrimitive {
        shape: Shape::Box { half_extents: [0.8, 0.4, 0.5] },
        color,
        class: CLASS_VEHICLE,
        trajectory: (0..n)
            .map(|f| Vec3::new(from + (to - from) * progress(f), 0.4, z))
            .collect(),
        shadow,
    };

    let lane_shift = jitter(0.15);
    let dynamic_primitives = match spec_name {
        "moving-box" => vec![vehicle(-2.2, 2.2, 1.2 + lane_shift, tint([0.90, 0.16, 0.12], &mut jitter), None)],
        "two-cars" => vec![
            vehicle(-2.2, 2.2, 1.2 + lane_shift, tint([0.90, 0.16, 0.12], &mut jitter), None),
            vehicle(2.4, -1.6, 2.3 + lane_shift, tint([0.15, 0.25, 0.85], &mut jitter), None),
        ],
        "shadow-caster" => vec![vehicle(
            -2.2,
            2.2,
            1.2 + lane_shift,
            tint([0.90, 0.80, 0.15], &mut jitter),
            Some(ShadowDisc { offset: [0.3, -0.75], radius: 0.85 }),
        )],
        _ => Vec::new(),
    };

    let mut cameras = Vec::with_capacity(n);
    for f in 0..n {
        let x = -0.4 + 0.8 * progress(f);
        let cam = Camera::look_at(
            Vec3::new(x, 1.4, -3.6),
            Vec3::new(x * 0.5, 0.5, 2.5),
            Vec3::new(0.0, 1.0, 0.0),
            options.width as f64 * 0.85,
            options.width,
            options.height,
        )?;
        cameras.push(cam);
    }

    Ok(SyntheticScene {
        name: spec_name.to_string(),
        seed,
        bounds: SCENE_BOUNDS,
        static_primitives,
        dynamic_primitives,
        ground_height: 0.0,
        ground_class: CLASS_ROAD,
        sky_color: [0.62, 0.76, 0.95],
        frames: (0..n).map(progress).collect(),
        cameras,
        class_table: ClassTable::standard(),
    })
}

/// What a ray hits first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitKind {
    Static(usize),
    Dynamic(usize),
    Ground { shadowed: bool },
    Sky,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub kind: HitKind,
    pub distance: f64,
    pub normal: Vec3,
}

impl SyntheticScene {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_table.len()
    }

    /// Normalized time of a frame: `frame / (num_frames - 1)`.
    pub fn timestamp(&self, frame: usize) -> f64 {
        self.frames[frame]
    }

    /// First surface hit by a ray at `frame`.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, frame: usize) -> Hit {
        let mut best = Hit {
            kind: HitKind::Sky,
            distance: f64::INFINITY,
            normal: Vec3::zeros(),
        };
        for (i, p) in self.static_primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(&p.center, origin, dir) {
                if t < best.distance {
                    best = Hit { kind: HitKind::Static(i), distance: t, normal };
                }
            }
        }
        for (i, p) in self.dynamic_primitives.iter().enumerate() {
            if let Some((t, normal)) = p.shape.intersect(&p.trajectory[frame], origin, dir) {
                if t < best.distance {
                    best = Hit { kind: HitKind::Dynamic(i), distance: t, normal };
                }
            }
        }
        if dir.y.abs() > 1e-300 {
            let t = (self.ground_height - origin.y) / dir.y;
            let p = origin + dir * t;
            let inside = p.x >= self.bounds.min[0]
                && p.x <= self.bounds.max[0]
                && p.z >= self.bounds.min[2]
                && p.z <= self.bounds.max[2];
            if t > HIT_EPS && inside && t < best.distance {
                let shadowed = self.dynamic_primitives.iter().any(|d| match d.shadow {
                    Some(disc) => {
                        let c = d.trajectory[frame];
                        let dx = p.x - (c.x + disc.offset[0]);
                        let dz = p.z - (c.z + disc.offset[1]);
                        dx * dx + dz * dz <= disc.radius * disc.radius
                    }
                    None => false,
                });
                best = Hit {
                    kind: HitKind::Ground { shadowed },
                    distance: t,
                    normal: Vec3::new(0.0, 1.0, 0.0),
                };
            }
        }
        best
    }

    fn shade(&self, hit: &Hit, origin: &Vec3, dir: &Vec3) -> [f64; 3] {
        let face = |n: &Vec3| 0.62 + 0.38 * n.y.max(0.0) + 0.12 * n.x.abs() + 0.02 * n.z.abs();
        match hit.kind {
            HitKind::Sky => self.sky_color,
            HitKind::Static(i) => {
                let s = face(&hit.normal).min(1.0);
                self.static_primitives[i].color.map(|c| c * s)
            }
            HitKind::Dynamic(i) => {
                let s = face(&hit.normal).min(1.0);
                self.dynamic_primitives[i].color.map(|c| c * s)
            }
            HitKind::Ground { shadowed } => {
                let p = origin + dir * hit.distance;
                let base = if p.x.abs() < 0.08 && (p.z * 1.5).rem_euclid(1.0) < 0.6 { 0.88 } else { 0.42 };
                let k = if shadowed { SHADOW_FACTOR } else { 1.0 };
                [base * k, base * k, (base + 0.02) * k]
            }
        }
    }

    /// Exact ground truth for every pixel of `frame`.
    pub fn rasterize_ground_truth(&self, frame: usize) -> Result<GroundTruth> {
        if frame >= self.num_frames() {
            return Err(Error::Argument(format!(
                "frame {frame} out of range ({} frames)",
                self.num_frames()
            )));
        }
        let cam = &self.cameras[frame];
        let (w, h) = (cam.width, cam.height);
        let mut gt = GroundTruth {
            width: w,
            height: h,
            color: Vec::with_capacity(w * h),
            depth: Vec::with_capacity(w * h),
            semantics: Vec::with_capacity(w * h),
            motion: Vec::with_capacity(w * h),
            sky: Vec::with_capacity(w * h),
            road: Vec::with_capacity(w * h),
        };
        for row in 0..h {
            for col in 0..w {
                let ray = generate_frame_ray(cam, row, col, self.timestamp(frame), frame)?;
                let hit = self.trace(&ray.origin, &ray.direction, frame);
                gt.color.push(self.shade(&hit, &ray.origin, &ray.direction));
                let (class, moving) = match hit.kind {
                    HitKind::Sky => (CLASS_SKY, false),
                    HitKind::Static(i) => (self.static_primitives[i].class, false),
                    HitKind::Dynamic(i) => (self.dynamic_primitives[i].class, true),
                    HitKind::Ground { shadowed } => (self.ground_class, shadowed),
                };
                gt.depth.push(if hit.kind == HitKind::Sky { 0.0 } else { hit.distance });
                gt.semantics.push(class);
                gt.motion.push(moving);
                gt.sky.push(hit.kind == HitKind::Sky);
                gt.road.push(class == CLASS_ROAD);
            }
        }
        Ok(gt)
    }
}

/// Per-pixel ground truth of one frame, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub color: Vec<[f64; 3]>,
    /// Distance along the unit ray direction; 0 where the ray sees sky.
    pub depth: Vec<f64>,
    pub semantics: Vec<usize>,
    pub motion: Vec<bool>,
    pub sky: Vec<bool>,
    pub road: Vec<bool>,
}

/// A square block of rays from one frame with its ground truth, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub frame_index: usize,
    pub top_left: (usize, usize),
    pub size: usize,
    pub rays: Vec<Ray>,
    pub ground_truth_color: Vec<[f64; 3]>,
    pub ground_truth_depth: Vec<f64>,
    pub ground_truth_semantics: Vec<usize>,
    pub sky_mask: Vec<bool>,
    pub road_mask: Vec<bool>,
    pub motion_mask: Vec<bool>,
}

/// Rendered ground truth for a subset of a scene's frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scene: SyntheticScene,
    pub frames: Vec<usize>,
    truth: Vec<GroundTruth>,
}

impl Dataset {
    pub fn new(scene: SyntheticScene, frames: Vec<usize>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Config("dataset needs at least one frame".into()));
        }
        let truth = frames
            .iter()
            .map(|&f| scene.rasterize_ground_truth(f))
            .collect::<Result<Vec<_>>>()?;
        for &f in &frames {
            scene.cameras[f].validate()?;
        }
        Ok(Dataset { scene, frames, truth })
    }

    pub fn all_frames(scene: SyntheticScene) -> Result<Self> {
        let frames = (0..scene.num_frames()).collect();
        Dataset::new(scene, frames)
    }

    /// Ground truth of the `i`-th dataset frame (not scene frame index).
    pub fn truth(&self, i: usize) -> &GroundTruth {
        &self.truth[i]
    }

    pub fn num_pixels(&self) -> usize {
        self.truth.iter().map(|t| t.width * t.height).sum()
    }

    /// Cuts the `size`x`size` patch at `top_left` out of dataset frame `i`.
    pub fn patch(&self, i: usize, top_left: (usize, usize), size: usize) -> Result<Patch> {
        let frame = self.frames[i];
        let cam = &self.scene.cameras[frame];
        let gt = &self.truth[i];
        let (r0, c0) = top_left;
        if r0 + size > cam.height || c0 + size > cam.width {
            return Err(Error::Argument(format!("patch at ({r0}, {c0}) exceeds the image")));
        }
        let mut patch = Patch {
            frame_index: frame,
            top_left,
            size,
            rays: Vec::with_capacity(size * size),
            ground_truth_color: Vec::with_capacity(size * size),
            ground_truth_depth: Vec::with_capacity(size * size),
            ground_truth_semantics: Vec::with_capacity(size * size),
            sky_mask: Vec::with_capacity(size * size),
            road_mask: Vec::with_capacity(size * size),
            motion_mask: Vec::with_capacity(size * size),
        };
        for r in r0..r0 + size {
            for c in c0..c0 + size {
                let k = r * gt.width + c;
                patch
                    .rays
                    .push(generate_frame_ray(cam, r, c, self.scene.timestamp(frame), frame)?);
                patch.ground_truth_color.push(gt.color[k]);
                patch.ground_truth_depth.push(gt.depth[k]);
                patch.ground_truth_semantics.push(gt.semantics[k]);
                patch.sky_mask.push(gt.sky[k]);
                patch.road_mask.push(gt.road[k]);
                patch.motion_mask.push(gt.motion[k]);
            }
        }
        Ok(patch)
    }

    /// Draws `batch_size` patches uniformly over (frame, position).
    pub fn sample_patches(&self, batch_size: usize, rng: &mut impl RngCore) -> Result<Vec<Patch>> {
        (0..batch_size)
            .map(|_| {
                let i = rng.random_range(0..self.frames.len());
                let cam = &self.scene.cameras[self.frames[i]];
                let r0 = rng.random_range(0..=cam.height - PATCH_SIZE);
                let c0 = rng.random_range(0..=cam.width - PATCH_SIZE);
                self.patch(i, (r0, c0), PATCH_SIZE)
            })
            .collect()
    }
}

/// Samples `batch_size` patches from all frames of `scene`, reproducibly from `rng_seed`.
pub fn sample_patches(scene: &SyntheticScene, batch_size: usize, rng_seed: u64) -> Result<Vec<Patch>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let data = Dataset::all_frames(scene.clone())?;
    let mut rng = rng::stream(rng_seed, Substream::Sampler, 0);
    data.sample_patches(batch_size, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_only_has_no_dynamics_and_no_motion() {
        let scene = generate_scene("static-only", 0).unwrap();
        assert!(scene.dynamic_primitives.is_empty());
        for f in 0..scene.num_frames() {
            let gt = scene.rasterize_ground_truth(f).unwrap();
            assert!(gt.motion.iter().all(|m| !m));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene("moving-box", 7).unwrap();
        let b = generate_scene("moving-box", 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene("moving-box", 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_scene_is_a_config_error() {
        assert!(matches!(generate_scene("nope", 0), Err(Error::Config(_))));
    }

    #[test]
    fn moving_box_has_motion_pixels() {
        let scene = generate_scene("moving-box", 7).unwrap();
        let total: usize = (0..scene.num_frames())
            .map(|f| scene.rasterize_ground_truth(f).unwrap().motion.iter().filter(|m| **m).count())
            .sum();
        assert!(total > 0);
        // every frame sees the car
        for f in 0..scene.num_frames() {
            let gt = scene.rasterize_ground_truth(f).unwrap();
            assert!(gt.motion.iter().any(|m| *m), "frame {f}");
        }
    }

    #[test]
    fn shadow_caster_marks_shadow_pixels_as_moving_road() {
        let scene = generate_scene("shadow-caster", 1).unwrap();
        let mut shadowed = 0;
        for f in 0..scene.num_frames() {
            let gt = scene.rasterize_ground_truth(f).unwrap();
            for k in 0..gt.motion.len() {
                if gt.motion[k] && gt.semantics[k] == CLASS_ROAD {
                    shadowed += 1;
                    assert!(gt.road[k]);
                }
            }
        }
        assert!(shadowed > 0);
    }

    #[test]
    fn masks_are_consistent_with_semantics() {
        for name in SCENE_NAMES {
            let scene = generate_scene(name, 3).unwrap();
            for f in 0..scene.num_frames() {
                let gt = scene.rasterize_ground_truth(f).unwrap();
                for k in 0..gt.sky.len() {
                    assert_eq!(gt.sky[k], gt.semantics[k] == CLASS_SKY);
                    assert_eq!(gt.road[k], gt.semantics[k] == CLASS_ROAD);
                    assert_eq!(gt.sky[k], gt.depth[k] == 0.0);
                    if gt.motion[k] {
                        assert!(gt.semantics[k] == CLASS_VEHICLE || gt.semantics[k] == CLASS_ROAD);
                    }
                }
                assert!(gt.sky.iter().any(|s| *s), "{name} frame {f} should see sky");
                assert!(gt.road.iter().any(|s| *s), "{name} frame {f} should see road");
            }
        }
    }

    #[test]
    fn box_depth_matches_closed_form() {
        // Camera on the z axis looking at a unit box: the center ray hits the
        // near face at distance (box_z - half) - cam_z.
        let mut scene = generate_scene("static-only", 0).unwrap();
        scene.static_primitives = vec![StaticPrimitive {
            shape: Shape::Box { half_extents: [0.5, 0.5, 0.5] },
            center: Vec3::new(0.0, 2.0, 1.0),
            color: [1.0, 0.0, 0.0],
            class: CLASS_BACKGROUND,
        }];
        let cam = Camera::look_at(
            Vec3::new(0.0, 2.0, -3.0),
            Vec3::new(0.0, 2.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            20.0,
            15,
            15,
        )
        .unwrap();
        scene.cameras = vec![cam; scene.num_frames()];
        let gt = scene.rasterize_ground_truth(0).unwrap();
        let center = 7 * 15 + 7;
        assert!((gt.depth[center] - 3.5).abs() < 1e-9);
        assert_eq!(gt.semantics[center], CLASS_BACKGROUND);
    }

    #[test]
    fn principal_pixel_looks_forward() {
        let cam = Camera::look_at(
            Vec3::new(0.3, 1.0, -2.0),
            Vec3::new(1.0, 0.0, 2.0),
            Vec3::new(0.0, 1.0, 0.0),
            30.0,
            15,
            15,
        )
        .unwrap();
        let ray = generate_ray(&cam, 7, 7, 0.5).unwrap();
        assert!((ray.direction - cam.forward()).norm() < 1e-12);
        assert_eq!(ray, generate_ray(&cam, 7, 7, 0.5).unwrap());
        assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_corner_half_angle() {
        let cam = Camera::look_at(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 1.0, 0.0),
            40.0,
            48,
            32,
        )
        .unwrap();
        let d = cam.orientation.transpose() * cam.direction_at(0.0, 16.0);
        assert!(((d.x / d.z).abs() - 24.0 / 40.0).abs() < 1e-12);
        let d = cam.orientation.transpose() * cam.direction_at(0.5, 16.0);
        assert!(((d.x / d.z).abs() - 23.5 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        let scene = generate_scene("moving-box", 0).unwrap();
        assert!(matches!(generate_ray(&scene.cameras[0], 48, 0, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn small_resolution_is_rejected() {
        let opts = SceneOptions { frames: 2, width: 14, height: 20 };
        assert!(generate_scene_with("moving-box", 0, &opts).is_err());
    }

    #[test]
    fn patches_are_inside_and_reproducible() {
        let scene = generate_scene("moving-box", 1).unwrap();
        let a = sample_patches(&scene, 200, 11).unwrap();
        let b = sample_patches(&scene, 200, 11).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.rays.len(), PATCH_SIZE * PATCH_SIZE);
            for r in &p.rays {
                assert_eq!(r.frame_index, p.frame_index);
                assert!(r.pixel.0 < 48 && r.pixel.1 < 48);
            }
            assert!(p.ground_truth_semantics.iter().all(|s| *s < scene.num_classes()));
        }
    }

    #[test]
    fn timestamps_are_normalized() {
        let scene = generate_scene("two-cars", 0).unwrap();
        assert_eq!(scene.frames[0], 0.0);
        assert_eq!(*scene.frames.last().unwrap(), 1.0);
        assert!(scene.class_table.movable()[CLASS_VEHICLE]);
        assert_eq!(scene.class_table.movable().iter().filter(|m| **m).count(), 1);
    }
}
