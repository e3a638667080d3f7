//! Synthetic multi-task classification data.
//!
//! Task `k` owns one cell of a square grid (the same grid the patch-fusion attack
//! uses). Its label is the orientation class of a bar drawn inside that cell: class
//! `c` of `C` is drawn at angle `π·c/C` plus a small jitter, with random colour,
//! contrast sign/magnitude and position. Labels of different tasks are drawn
//! independently, so each task depends on its own latent factor only.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{MultiTaskDataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub class_counts: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_level: f32,
    /// Bar contrast is drawn uniformly from this range.
    pub contrast: (f32, f32),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_counts: vec![2; 4],
            n_train: 2000,
            n_test: 500,
            channels: 3,
            height: 16,
            width: 16,
            noise_level: 0.05,
            contrast: (0.12, 0.25),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("dataset.{field}"), msg));
        if self.class_counts.is_empty() {
            return bad("class_counts", "at least one task is required");
        }
        if self.class_counts.iter().any(|&c| c < 2) {
            return bad("class_counts", "every task needs at least 2 classes");
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train", "both splits need at least one sample");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        let n = grid_side(self.class_counts.len());
        if self.height < 4 * n || self.width < 4 * n {
            return bad("height", "image too small for the task grid (need 4 px per cell)");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level", "must be a finite non-negative number");
        }
        let (lo, hi) = self.contrast;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("contrast", "need 0 < lo <= hi <= 1");
        }
        Ok(())
    }
}

/// Side count of the smallest power-of-two grid with at least `k` cells.
pub fn grid_side(k: usize) -> usize {
    let root = (k as f64).sqrt().ceil() as usize;
    root.max(1).next_power_of_two()
}

struct Bar {
    cy: f32,
    cx: f32,
    angle: f32,
    half_len: f32,
    half_width: f32,
    color: Vec<f32>,
    amp: f32,
}

impl Bar {
    /// Soft coverage in [0,1] of pixel centre `(y, x)`.
    fn coverage(&self, y: f32, x: f32) -> f32 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        let a = (self.half_len + 0.5 - along.abs()).clamp(0.0, 1.0);
        let b = (self.half_width + 0.5 - across.abs()).clamp(0.0, 1.0);
        a * b
    }
}

fn render(spec: &SynthSpec, labels: &[usize], rng: &mut rng::Rng) -> Vec<f32> {
    let (ch, h, w) = (spec.channels, spec.height, spec.width);
    let n = grid_side(spec.class_counts.len());
    let (ph, pw) = ((h / n) as f32, (w / n) as f32);
    let mut img = vec![0f32; ch * h * w];
    let base: f32 = rng.gen_range(0.35..0.65);
    for c in 0..ch {
        let tint: f32 = rng.gen_range(-0.05..0.05);
        img[c * h * w..(c + 1) * h * w].fill(base + tint);
    }
    for (k, (&y, &classes)) in labels.iter().zip(&spec.class_counts).enumerate() {
        let (row, col) = ((k / n) as f32, (k % n) as f32);
        let step = std::f32::consts::PI / classes as f32;
        let jitter = step / 4.0;
        let side = ph.min(pw);
        let bar = Bar {
            cy: (row + 0.5) * ph - 0.5 + rng.gen_range(-0.125..0.125) * ph,
            cx: (col + 0.5) * pw - 0.5 + rng.gen_range(-0.125..0.125) * pw,
            angle: step * y as f32 + rng.gen_range(-jitter..jitter),
            half_len: side * rng.gen_range(0.28..0.36),
            half_width: (side * 0.08).max(0.5),
            color: (0..ch).map(|_| rng.gen_range(0.4f32..1.0)).collect(),
            amp: rng.gen_range(spec.contrast.0..=spec.contrast.1) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        };
        let (y0, y1) = ((row * ph) as usize, ((row + 1.0) * ph) as usize);
        let (x0, x1) = ((col * pw) as usize, ((col + 1.0) * pw) as usize);
        for py in y0..y1 {
            for px in x0..x1 {
                let cov = bar.coverage(py as f32, px as f32);
                if cov > 0.0 {
                    for c in 0..ch {
                        img[(c * h + py) * w + px] += bar.amp * bar.color[c] * cov;
                    }
                }
            }
        }
    }
    if spec.noise_level > 0.0 {
        let noise = Normal::new(0.0, spec.noise_level).expect("validated noise level");
        for v in &mut img {
            *v += noise.sample(rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Exactly balanced labels: each class appears `⌊n/C⌋` or `⌈n/C⌉` times per task.
fn balanced_labels(n: usize, class_counts: &[usize], seed: u64) -> Vec<usize> {
    let k = class_counts.len();
    let mut labels = vec![0; n * k];
    for (t, &classes) in class_counts.iter().enumerate() {
        let mut r = rng::stream(seed, t as u64);
        let perm = rng::permutation(n, &mut r);
        for (i, &p) in perm.iter().enumerate() {
            labels[p * k + t] = i % classes;
        }
    }
    labels
}

fn generate_split(spec: &SynthSpec, n: usize, split: Split, seed: u64) -> Result<MultiTaskDataset> {
    let tag = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let k = spec.class_counts.len();
    let labels = balanced_labels(n, &spec.class_counts, rng::derive_seed(seed, &format!("labels/{tag}")));
    let pixel_seed = rng::derive_seed(seed, &format!("pixels/{tag}"));
    let per = spec.channels * spec.height * spec.width;
    let mut data = vec![0f32; n * per];
    data.par_chunks_mut(per).enumerate().for_each(|(i, out)| {
        let mut r = rng::stream(pixel_seed, i as u64);
        out.copy_from_slice(&render(spec, &labels[i * k..(i + 1) * k], &mut r));
    });
    let images = Tensor::new([n, spec.channels, spec.height, spec.width], data)?;
    MultiTaskDataset::new(images, labels, spec.class_counts.clone(), split)
}

/// Deterministic train/test pair for `spec`.
pub fn generate_classification_mtl(spec: &SynthSpec, seed: u64) -> Result<(MultiTaskDataset, MultiTaskDataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, spec.n_train, Split::Train, seed)?,
        generate_split(spec, spec.n_test, Split::Test, seed)?,
    ))
}
