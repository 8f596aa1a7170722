//! Procedural source/target image tasks with controllable class overlap and
//! appearance shift.
//!
//! Every class is a *generator*: a shape of some colour over an oriented
//! colour grating, rendered with random position, size, phase, brightness and
//! pixel noise. Generator parameters depend only on the seed and the
//! generator id, so a target task that reuses a source id draws from exactly
//! the source class distribution before its appearance transform.

use alloc::format;
use alloc::vec::Vec;

use core::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Generator ids of novel target classes start here.
pub const NOVEL_BASE: u64 = 1 << 20;

const SPLIT_SOURCE_TRAIN: u64 = 1;
const SPLIT_SOURCE_EVAL: u64 = 2;
const SPLIT_TARGET_TRAIN: u64 = 3;
const SPLIT_TARGET_EVAL: u64 = 4;
const TASK_STREAM: u64 = 5;
const CLASS_STREAM: u64 = 1 << 32;
/// Per-image colour jitter, per channel.
const JITTER: f64 = 0.15;

/// How the target task departs from the source task.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Shift {
    /// Fraction of target classes whose generator is a source generator.
    pub overlap: f64,
    /// Hue rotation of target images, in degrees.
    pub hue_degrees: f64,
    /// Peak displacement of the sinusoidal warp, in pixels.
    pub warp_pixels: f64,
}

impl Shift {
    pub fn identity(overlap: f64) -> Self {
        Self {
            overlap,
            hue_degrees: 0.0,
            warp_pixels: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SynthConfig {
    pub seed: u64,
    /// Side of the square RGB images.
    pub image_size: usize,
    pub source_classes: usize,
    pub target_classes: usize,
    pub source_train_per_class: usize,
    pub source_eval_per_class: usize,
    pub target_train_per_class: usize,
    pub target_eval_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    pub shift: Shift,
}

impl SynthConfig {
    pub fn desk(seed: u64, shift: Shift) -> Self {
        Self {
            seed,
            image_size: 16,
            source_classes: 10,
            target_classes: 10,
            source_train_per_class: 100,
            source_eval_per_class: 20,
            target_train_per_class: 20,
            target_eval_per_class: 30,
            noise: 0.2,
            shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::InvalidArgument(format!("synthetic task: {reason}")));
        if self.source_classes == 0 || self.target_classes == 0 {
            return bad("class counts must be positive");
        }
        if [
            self.source_train_per_class,
            self.source_eval_per_class,
            self.target_train_per_class,
            self.target_eval_per_class,
        ]
        .contains(&0)
        {
            return bad("every split needs at least one example per class");
        }
        if self.image_size < 4 {
            return bad("images must be at least 4 pixels wide");
        }
        let s = &self.shift;
        if !(0.0..=1.0).contains(&s.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if self.shared_classes() > self.source_classes {
            return bad("overlap asks for more shared classes than the source has");
        }
        if !(s.hue_degrees.is_finite() && s.warp_pixels.is_finite() && s.warp_pixels >= 0.0 && self.noise >= 0.0) {
            return bad("transform parameters must be finite and nonnegative where applicable");
        }
        Ok(())
    }

    pub fn shared_classes(&self) -> usize {
        libm::round(self.shift.overlap * self.target_classes as f64) as usize
    }
}

/// Source and target tasks plus the generator behind each target label.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub source_train: Dataset,
    pub source_eval: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
    /// Generator id of each target label; source label `k` uses generator `k`.
    pub target_generators: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ShapeKind {
    Disk,
    Square,
    Ring,
    Cross,
    Diamond,
    Bar,
}

const SHAPES: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Ring,
    ShapeKind::Cross,
    ShapeKind::Diamond,
    ShapeKind::Bar,
];

#[derive(Debug, Clone, Copy)]
struct ClassParams {
    shape: ShapeKind,
    fg: [f64; 3],
    bg: [f64; 3],
    angle: f64,
    frequency: f64,
}

#[derive(Debug, Clone, Copy)]
struct Appearance {
    hue: f64,
    warp: f64,
    warp_phase: [f64; 2],
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Classes share attributes drawn from small palettes, so telling them apart
/// takes combinations of shape, colour and texture.
const PALETTE: [[f64; 3]; 5] = [
    [0.9, 0.25, 0.2],
    [0.25, 0.8, 0.3],
    [0.25, 0.35, 0.9],
    [0.9, 0.8, 0.25],
    [0.7, 0.3, 0.8],
];
const FREQUENCIES: [f64; 2] = [2.0, 3.5];

fn class_params(seed: u64, generator: u64) -> ClassParams {
    let mut rng = stream(seed, CLASS_STREAM + generator);
    ClassParams {
        shape: SHAPES[rng.gen_range(0..SHAPES.len())],
        fg: PALETTE[rng.gen_range(0..PALETTE.len())],
        bg: PALETTE[rng.gen_range(0..PALETTE.len())].map(|c| 0.6 * c),
        angle: rng.gen_range(0..4) as f64 * PI / 4.0,
        frequency: FREQUENCIES[rng.gen_range(0..FREQUENCIES.len())],
    }
}

fn shape_distance(kind: ShapeKind, dx: f64, dy: f64, radius: f64) -> f64 {
    // Signed-ish distance: positive inside the shape.
    let (ax, ay) = (libm::fabs(dx), libm::fabs(dy));
    let thin = radius / 3.0;
    match kind {
        ShapeKind::Disk => radius - libm::sqrt(dx * dx + dy * dy),
        ShapeKind::Square => radius - ax.max(ay),
        ShapeKind::Ring => thin - libm::fabs(libm::sqrt(dx * dx + dy * dy) - radius * 0.8),
        ShapeKind::Cross => (thin - ax.min(ay)).min(radius - ax.max(ay)),
        ShapeKind::Diamond => radius * 1.2 - (ax + ay),
        ShapeKind::Bar => (thin - ay).min(radius * 1.2 - ax),
    }
}

/// Rotates an RGB colour about the grey axis.
fn rotate_hue(rgb: [f64; 3], radians: f64) -> [f64; 3] {
    let (s, c) = (libm::sin(radians), libm::cos(radians));
    let k = 1.0 / libm::sqrt(3.0);
    // Rodrigues rotation about (1,1,1)/sqrt(3).
    let dot = (rgb[0] + rgb[1] + rgb[2]) * k;
    let cross = [
        k * (rgb[2] - rgb[1]),
        k * (rgb[0] - rgb[2]),
        k * (rgb[1] - rgb[0]),
    ];
    core::array::from_fn(|i| rgb[i] * c + cross[i] * s + k * dot * (1.0 - c))
}

fn render(p: &ClassParams, look: &Appearance, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cx = 0.5 + rng.gen_range(-0.18..0.18);
    let cy = 0.5 + rng.gen_range(-0.18..0.18);
    let radius = rng.gen_range(0.16..0.3);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let gain = rng.gen_range(0.75..1.25);
    let angle = p.angle + rng.gen_range(-0.2..0.2);
    let (sa, ca) = (libm::sin(angle), libm::cos(angle));
    let mut jitter = |c: [f64; 3]| c.map(|v| v + rng.gen_range(-JITTER..JITTER));
    let fg = rotate_hue(jitter(p.fg), look.hue);
    let bg = rotate_hue(jitter(p.bg), look.hue);
    let plane = size * size;
    let mut img = alloc::vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let mut u = (x as f64 + 0.5) / size as f64;
            let mut v = (y as f64 + 0.5) / size as f64;
            if look.warp > 0.0 {
                let a = look.warp / size as f64;
                let (u0, v0) = (u, v);
                u += a * libm::sin(2.0 * PI * 1.5 * v0 + look.warp_phase[0]);
                v += a * libm::sin(2.0 * PI * 1.5 * u0 + look.warp_phase[1]);
            }
            let wave = 0.5 + 0.5 * libm::sin(2.0 * PI * p.frequency * (u * ca + v * sa) + phase);
            let d = shape_distance(p.shape, u - cx, v - cy, radius);
            let m = 1.0 / (1.0 + libm::exp(-d * size as f64 * 3.0));
            for ch in 0..3 {
                let back = bg[ch] * (0.3 + 0.7 * wave);
                let value = gain * (m * fg[ch] + (1.0 - m) * back);
                img[ch * plane + y * size + x] = value + noise * standard_normal(rng);
            }
        }
    }
    // Stored as 32-bit floats on disk; round here so memory and disk agree.
    img.iter_mut().for_each(|v| *v = *v as f32 as f64);
    img
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * PI * u2)
}

fn render_split(cfg: &SynthConfig, generators: &[u64], per_class: usize, look: &Appearance, split: u64) -> Result<Dataset> {
    let params: Vec<ClassParams> = generators.iter().map(|&g| class_params(cfg.seed, g)).collect();
    let mut rng = stream(cfg.seed, split);
    let mut images = Vec::with_capacity(per_class * generators.len() * 3 * cfg.image_size * cfg.image_size);
    let mut labels = Vec::with_capacity(per_class * generators.len());
    for _ in 0..per_class {
        for (label, p) in params.iter().enumerate() {
            images.extend(render(p, look, cfg.image_size, cfg.noise, &mut rng));
            labels.push(label);
        }
    }
    Dataset::new([3, cfg.image_size, cfg.image_size], generators.len(), images, labels)
}

/// Generator ids of the target labels: shared source ids (ascending) first,
/// then novel ids.
pub fn target_generators(cfg: &SynthConfig) -> Result<Vec<u64>> {
    cfg.validate()?;
    let shared = cfg.shared_classes();
    let mut rng = stream(cfg.seed, TASK_STREAM);
    let mut ids: Vec<u64> = sample(&mut rng, cfg.source_classes, shared).into_iter().map(|i| i as u64).collect();
    ids.sort_unstable();
    ids.extend((0..(cfg.target_classes - shared) as u64).map(|j| NOVEL_BASE + j));
    Ok(ids)
}

pub fn generate(cfg: &SynthConfig) -> Result<TaskPair> {
    let generators = target_generators(cfg)?;
    let mut rng = stream(cfg.seed, TASK_STREAM);
    rng.set_word_pos(1 << 20);
    let plain = Appearance {
        hue: 0.0,
        warp: 0.0,
        warp_phase: [0.0; 2],
    };
    let shifted = Appearance {
        hue: cfg.shift.hue_degrees.to_radians(),
        warp: cfg.shift.warp_pixels,
        warp_phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
    };
    let source: Vec<u64> = (0..cfg.source_classes as u64).collect();
    Ok(TaskPair {
        source_train: render_split(cfg, &source, cfg.source_train_per_class, &plain, SPLIT_SOURCE_TRAIN)?,
        source_eval: render_split(cfg, &source, cfg.source_eval_per_class, &plain, SPLIT_SOURCE_EVAL)?,
        target_train: render_split(cfg, &generators, cfg.target_train_per_class, &shifted, SPLIT_TARGET_TRAIN)?,
        target_eval: render_split(cfg, &generators, cfg.target_eval_per_class, &shifted, SPLIT_TARGET_EVAL)?,
        target_generators: generators,
    })
}
