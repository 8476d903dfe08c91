//! Deterministic two-domain toy detection data.
//!
//! Source images are flat-shaded geometric shapes over smooth value-noise
//! backgrounds; target images are the same kind of scene pushed through
//! [`apply_domain_shift`] (fog, blur, sensor noise, brightness).

mod io;
mod shift;

use std::cell::Cell;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::boxes::{iou, BBox};

pub use io::{
    dataset_hash, load_dataset, load_image, read_manifest, write_dataset, Dataset, Manifest,
    ManifestBox, ManifestEntry, MANIFEST_FILE,
};
pub use shift::{apply_domain_shift, DomainShiftParams, FOG_GRAY};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset manifest missing at {0}")]
    MissingManifest(String),
    #[error("failed to read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("sample '{id}': {reason}")]
    Sample { id: String, reason: String },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    /// Label used by the domain discriminators.
    pub fn label(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    pub class_id: usize,
    pub bbox: BBox,
}

thread_local! {
    static TARGET_ANNOTATION_READS: Cell<usize> = const { Cell::new(0) };
}

/// Number of times target-domain annotations were read on this thread.
pub fn target_annotation_reads() -> usize {
    TARGET_ANNOTATION_READS.with(|c| c.get())
}

pub fn reset_target_annotation_reads() {
    TARGET_ANNOTATION_READS.with(|c| c.set(0));
}

/// One RGB image, interleaved `H x W x 3` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    annotations: Vec<BoxAnnotation>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        domain: Domain,
        width: usize,
        height: usize,
        pixels: Vec<f32>,
        annotations: Vec<BoxAnnotation>,
    ) -> Self {
        assert_eq!(
            pixels.len(),
            width * height * 3,
            "pixel buffer size mismatch"
        );
        Self {
            id: id.into(),
            domain,
            width,
            height,
            pixels,
            annotations,
        }
    }

    /// Box annotations. Reads of target-domain annotations are counted
    /// (see [`target_annotation_reads`]).
    pub fn annotations(&self) -> &[BoxAnnotation] {
        if self.domain == Domain::Target && !self.annotations.is_empty() {
            TARGET_ANNOTATION_READS.with(|c| c.set(c.get() + 1));
        }
        &self.annotations
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.len()
    }

    /// Drops annotations without reading them.
    pub fn into_unlabeled(mut self) -> Self {
        self.annotations = Vec::new();
        self
    }

    pub fn unlabeled(&self) -> Self {
        Self {
            id: self.id.clone(),
            domain: self.domain,
            width: self.width,
            height: self.height,
            pixels: self.pixels.clone(),
            annotations: Vec::new(),
        }
    }

    /// Channel-major `3 x H x W` copy of the pixels.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }

    /// Pixels quantized to 8 bits, as stored on disk.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Rectangle,
        ShapeKind::Ellipse,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
    ];

    /// Whether the unit-square point `(u, v)`, both in `[-1, 1]`, lies inside the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Cross => {
                (u.abs() <= 0.34 || v.abs() <= 0.34) && u.abs() <= 1.0 && v.abs() <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub resolution: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            num_classes: 3,
            min_objects: 1,
            max_objects: 3,
            min_size: 18.0,
            max_size: 56.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.resolution < 16 {
            return Err(DataError::Config(format!(
                "resolution must be at least 16, got {}",
                self.resolution
            )));
        }
        if self.num_classes == 0 || self.num_classes > ShapeKind::ALL.len() {
            return Err(DataError::Config(format!(
                "classes must be in 1..={}, got {}",
                ShapeKind::ALL.len(),
                self.num_classes
            )));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(DataError::Config(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if !(self.min_size >= 4.0 && self.min_size <= self.max_size)
            || self.max_size >= self.resolution as f64
        {
            return Err(DataError::Config(format!(
                "object size range {}..{} does not fit resolution {}",
                self.min_size, self.max_size, self.resolution
            )));
        }
        Ok(())
    }
}

const MAX_PLACEMENT_IOU: f64 = 0.2;

/// Renders one scene with a random object count from the configured range.
pub fn generate_scene(
    seed: u64,
    domain: Domain,
    shift: &DomainShiftParams,
    cfg: &SceneConfig,
) -> Result<ImageSample, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    render(seed, k, domain, shift, cfg, &mut rng)
}

/// Renders a scene with exactly `num_objects` shapes.
pub fn generate_scene_with_count(
    seed: u64,
    num_objects: usize,
    domain: Domain,
    shift: &DomainShiftParams,
    cfg: &SceneConfig,
) -> Result<ImageSample, DataError> {
    cfg.validate()?;
    if num_objects == 0 {
        return Err(DataError::Config(
            "a scene needs at least one object".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let _ = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    render(seed, num_objects, domain, shift, cfg, &mut rng)
}

fn render(
    seed: u64,
    num_objects: usize,
    domain: Domain,
    shift: &DomainShiftParams,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSample, DataError> {
    shift.validate()?;
    let n = cfg.resolution;
    let mut img = value_noise_background(n, rng);
    let mut placed: Vec<BBox> = Vec::new();
    let mut annotations = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        let class_id = rng.gen_range(0..cfg.num_classes);
        let kind = ShapeKind::ALL[class_id];
        let mut frame = random_frame(n, cfg, rng);
        for _ in 0..64 {
            if placed.iter().all(|p| iou(p, &frame) <= MAX_PLACEMENT_IOU) {
                break;
            }
            frame = random_frame(n, cfg, rng);
        }
        placed.push(frame);
        let color = shape_color(rng);
        if let Some(bbox) = draw_shape(&mut img, n, kind, &frame, color) {
            annotations.push(BoxAnnotation { class_id, bbox });
        }
    }
    let mut pixels: Vec<f32> = img.iter().map(|&v| v as f32).collect();
    if domain == Domain::Target {
        pixels = apply_domain_shift(&pixels, n, n, shift, seed ^ 0x5eed_f00d_cafe_0001);
    }
    Ok(ImageSample::new(
        format!("{domain}_{seed:016x}"),
        domain,
        n,
        n,
        pixels,
        annotations,
    ))
}

fn random_frame(n: usize, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.gen_range(cfg.min_size..=cfg.max_size).round();
    let h = (w * rng.gen_range(0.7..=1.4))
        .round()
        .clamp(cfg.min_size, cfg.max_size);
    let x1 = rng.gen_range(0.0..=(n as f64 - w)).floor();
    let y1 = rng.gen_range(0.0..=(n as f64 - h)).floor();
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn shape_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // saturated: one channel high, one low, one random
    let hi = rng.gen_range(0.75..1.0);
    let lo = rng.gen_range(0.0..0.25);
    let mid = rng.gen_range(0.0..1.0);
    match rng.gen_range(0..6) {
        0 => [hi, lo, mid],
        1 => [hi, mid, lo],
        2 => [lo, hi, mid],
        3 => [mid, hi, lo],
        4 => [lo, mid, hi],
        _ => [mid, lo, hi],
    }
}

/// Smooth low-frequency colour texture from two octaves of value noise.
fn value_noise_background(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
        rng.gen_range(0.25..0.6),
    ];
    let mut img = vec![0.0; n * n * 3];
    for (cells, amp) in [(4usize, 0.18), (9usize, 0.08)] {
        let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1) * 3)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        for y in 0..n {
            let fy = y as f64 / n as f64 * cells as f64;
            let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
            for x in 0..n {
                let fx = x as f64 / n as f64 * cells as f64;
                let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| lattice[(yy * (cells + 1) + xx) * 3 + c];
                    let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
                    let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
                    img[(y * n + x) * 3 + c] += amp * (top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    for (i, v) in img.iter_mut().enumerate() {
        *v = (*v + base[i % 3]).clamp(0.0, 1.0);
    }
    img
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Fills the shape inscribed in `frame` and returns the tight box of the
/// covered pixels (pixel `(x, y)` covers `[x, x+1) x [y, y+1)`).
fn draw_shape(
    img: &mut [f64],
    n: usize,
    kind: ShapeKind,
    frame: &BBox,
    color: [f64; 3],
) -> Option<BBox> {
    let (cx, cy) = (frame.cx(), frame.cy());
    let (rx, ry) = (frame.width() / 2.0, frame.height() / 2.0);
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let ys = frame.y1.max(0.0) as usize..(frame.y2.ceil() as usize).min(n);
    for y in ys {
        let v = (y as f64 + 0.5 - cy) / ry;
        for x in frame.x1.max(0.0) as usize..(frame.x2.ceil() as usize).min(n) {
            let u = (x as f64 + 0.5 - cx) / rx;
            if kind.contains(u, v) {
                img[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&color);
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x + 1);
                y2 = y2.max(y + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64))
}

/// Derives the per-image seed for sample `index` of a domain.
pub fn sample_seed(dataset_seed: u64, domain: Domain, index: usize) -> u64 {
    // splitmix64 over (seed, domain, index)
    let mut z = dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((domain.label() as u64 + 1) << 40)
        .wrapping_add(index as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n_source` source and `n_target` target scenes.
pub fn generate_dataset(
    seed: u64,
    n_source: usize,
    n_target: usize,
    shift: &DomainShiftParams,
    cfg: &SceneConfig,
) -> Result<Vec<ImageSample>, DataError> {
    let mut out = Vec::with_capacity(n_source + n_target);
    for (domain, count) in [(Domain::Source, n_source), (Domain::Target, n_target)] {
        for i in 0..count {
            let mut s = generate_scene(sample_seed(seed, domain, i), domain, shift, cfg)?;
            s.id = format!("{domain}_{i:05}");
            out.push(s);
        }
    }
    Ok(out)
}
