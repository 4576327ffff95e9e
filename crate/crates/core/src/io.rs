//! Image and float-map files.
//!
//! Color images and masks are 8-bit PNG. Scalar maps (depth, opacity,
//! shadow) use a small binary format: the magic `DUOF`, then little-endian
//! u32 width, u32 height and a reserved u32, followed by `width * height`
//! little-endian f32 values in row-major order.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::FrameRender;
use crate::render::{blend_over, render_motion_mask};
use crate::scene::SyntheticScene;

pub const FLOAT_MAP_MAGIC: &[u8; 4] = b"DUOF";
pub const FLOAT_MAP_HEADER: usize = 16;

/// Maps a [0, 1] value to a byte, clamping out-of-range input.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(len: usize, width: usize, height: usize) -> Result<()> {
    if len != width * height {
        return Err(Error::Argument(format!("{len} pixels do not fill a {width}x{height} image")));
    }
    Ok(())
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<()> {
    check_len(pixels.len(), width, height)?;
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let p = pixels[y as usize * width + x as usize];
        Rgb([to_byte(p[0]), to_byte(p[1]), to_byte(p[2])])
    });
    img.save(path)?;
    Ok(())
}

pub fn write_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    check_len(mask.len(), width, height)?;
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Stores class indices directly as gray levels.
pub fn write_label_png(path: &Path, width: usize, height: usize, labels: &[usize]) -> Result<()> {
    check_len(labels.len(), width, height)?;
    if let Some(&l) = labels.iter().find(|&&l| l > 255) {
        return Err(Error::Argument(format!("class index {l} does not fit in 8 bits")));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| Luma([labels[y as usize * width + x as usize] as u8]));
    img.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0).collect()))
}

pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

/// A single-channel f32 image.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl FloatMap {
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        check_len(values.len(), width, height)?;
        Ok(FloatMap { width, height, values: values.iter().map(|&v| v as f32).collect() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FLOAT_MAP_HEADER + 4 * self.values.len());
        out.extend_from_slice(FLOAT_MAP_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        if bytes.len() < FLOAT_MAP_HEADER {
            return Err(fail("truncated header".into()));
        }
        if &bytes[..4] != FLOAT_MAP_MAGIC {
            return Err(fail("bad magic (expected DUOF)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (width, height) = (word(4), word(8));
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fail(format!("implausible size {width}x{height}")))?;
        let body = &bytes[FLOAT_MAP_HEADER..];
        if body.len() != expected {
            return Err(fail(format!("expected {expected} payload bytes, found {}", body.len())));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(FloatMap { width, height, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        FloatMap::from_bytes(&fs::read(path)?, path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct FrameSidecar<'a> {
    scene: &'a str,
    seed: u64,
    frame: usize,
    timestamp: f64,
    width: usize,
    height: usize,
    camera: &'a crate::scene::Camera,
    classes: Vec<&'a str>,
    files: [&'a str; 6],
    depth_format: &'static str,
    motion_pixels: usize,
}

/// Writes every frame's ground truth into `dir`: `frame_NNN_color.png`,
/// `_semantic.png` (class indices), `_motion.png`, `_sky.png`, `_road.png`,
/// `_depth.duof` and a `_meta.json` sidecar.
pub fn export_ground_truth(scene: &SyntheticScene, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for frame in 0..scene.num_frames() {
        let gt = scene.rasterize_ground_truth(frame)?;
        let (w, h) = (gt.width, gt.height);
        let stem = format!("frame_{frame:03}");
        let names = [
            format!("{stem}_color.png"),
            format!("{stem}_semantic.png"),
            format!("{stem}_motion.png"),
            format!("{stem}_sky.png"),
            format!("{stem}_road.png"),
            format!("{stem}_depth.duof"),
        ];
        write_rgb_png(&dir.join(&names[0]), w, h, &gt.color)?;
        write_label_png(&dir.join(&names[1]), w, h, &gt.semantics)?;
        write_mask_png(&dir.join(&names[2]), w, h, &gt.motion)?;
        write_mask_png(&dir.join(&names[3]), w, h, &gt.sky)?;
        write_mask_png(&dir.join(&names[4]), w, h, &gt.road)?;
        FloatMap::from_f64(w, h, &gt.depth)?.save(&dir.join(&names[5]))?;
        let meta = FrameSidecar {
            scene: &scene.name,
            seed: scene.seed,
            frame,
            timestamp: scene.timestamp(frame),
            width: w,
            height: h,
            camera: &scene.cameras[frame],
            classes: scene.class_table.classes.iter().map(|c| c.name.as_str()).collect(),
            files: [&names[0], &names[1], &names[2], &names[3], &names[4], &names[5]],
            depth_format: "DUOF v1: magic, u32 width, u32 height, u32 reserved, f32 LE row-major",
            motion_pixels: gt.motion.iter().filter(|&&m| m).count(),
        };
        let meta_path = dir.join(format!("{stem}_meta.json"));
        write_json(&meta_path, &meta)?;
        written.extend(names.iter().map(|n| dir.join(n)));
        written.push(meta_path);
    }
    Ok(written)
}

/// Background behind displayed dynamic colors.
pub const DYNAMIC_BACKGROUND: [f64; 3] = [0.0, 1.0, 0.0];

/// Writes the nine decomposition maps of a rendered frame: composed,
/// static and dynamic color (the latter over green), composed and static
/// depth, composed and static segmentation, motion mask and shadow map.
pub fn write_decomposition(render: &FrameRender, threshold: f64, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let (w, h) = (render.width, render.height);
    let stem = format!("frame_{:03}", render.frame);
    let path = |suffix: &str| dir.join(format!("{stem}_{suffix}"));
    let dynamic: Vec<[f64; 3]> = render
        .dynamic_color
        .iter()
        .zip(&render.dynamic_opacity)
        .map(|(c, &o)| blend_over(*c, o, DYNAMIC_BACKGROUND))
        .collect();
    let files = [
        path("composed.png"),
        path("static.png"),
        path("dynamic.png"),
        path("depth.duof"),
        path("static_depth.duof"),
        path("semantic.png"),
        path("static_semantic.png"),
        path("motion.png"),
        path("shadow.duof"),
    ];
    write_rgb_png(&files[0], w, h, &render.composed)?;
    write_rgb_png(&files[1], w, h, &render.static_color)?;
    write_rgb_png(&files[2], w, h, &dynamic)?;
    FloatMap::from_f64(w, h, &render.depth)?.save(&files[3])?;
    FloatMap::from_f64(w, h, &render.static_depth)?.save(&files[4])?;
    write_label_png(&files[5], w, h, &render.semantics)?;
    write_label_png(&files[6], w, h, &render.static_semantics)?;
    write_mask_png(&files[7], w, h, &render_motion_mask(&render.dynamic_opacity, threshold))?;
    FloatMap::from_f64(w, h, &render.shadow)?.save(&files[8])?;
    Ok(files.to_vec())
}
