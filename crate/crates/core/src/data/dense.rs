//! Synthetic dense-prediction data: segmentation of shape kinds plus a depth-like field.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::{DenseDataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct DenseSpec {
    pub n_train: usize,
    /// Defaults to a quarter of `n_train` when zero.
    pub n_test: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seg_classes: usize,
    pub noise_level: f32,
}

impl Default for DenseSpec {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 0,
            channels: 3,
            height: 32,
            width: 32,
            seg_classes: 4,
            noise_level: 0.05,
        }
    }
}

impl DenseSpec {
    pub fn test_size(&self) -> usize {
        if self.n_test == 0 {
            (self.n_train / 4).max(1)
        } else {
            self.n_test
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("dataset.{field}"), msg));
        if self.n_train == 0 {
            return bad("n_train", "must be positive");
        }
        if self.channels == 0 {
            return bad("channels", "must be positive");
        }
        if self.height < 8 || self.width < 8 || self.height % 4 != 0 || self.width % 4 != 0 {
            return bad("height", "height and width must be multiples of 4 and at least 8");
        }
        if self.seg_classes < 2 || self.seg_classes > ShapeKind::ALL.len() + 1 {
            return bad("seg_classes", "must be between 2 and 6 (background plus up to 5 shape kinds)");
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level", "must be a finite non-negative number");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Diamond,
    Ring,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Cross,
    ];

    /// Segmentation class; 0 is background.
    pub fn class(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap() + 1
    }

    fn contains(self, dy: f32, dx: f32, r: f32) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r * 1.1,
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::Cross => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
        }
    }
}

/// One object in a dense scene. Later shapes occlude earlier ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub cy: f32,
    pub cx: f32,
    pub radius: f32,
    pub color: Vec<f32>,
    /// Depth at the centre, and its gradient per pixel along (y, x).
    pub depth: f32,
    pub slope: (f32, f32),
}

/// Renders a noiseless scene: image `[Ch,H,W]`, segmentation `[H,W]`, depth `[H,W]`.
///
/// Background pixels get class 0 and depth 0.
pub fn render_dense_scene(spec: &DenseSpec, background: &[f32], shapes: &[SceneShape]) -> (Vec<f32>, Vec<usize>, Vec<f32>) {
    let (ch, h, w) = (spec.channels, spec.height, spec.width);
    let mut img = vec![0f32; ch * h * w];
    for c in 0..ch {
        img[c * h * w..(c + 1) * h * w].fill(background.get(c).copied().unwrap_or(0.0));
    }
    let mut seg = vec![0usize; h * w];
    let mut depth = vec![0f32; h * w];
    for s in shapes {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - s.cy, x as f32 - s.cx);
                if !s.kind.contains(dy, dx, s.radius) {
                    continue;
                }
                let d = (s.depth + s.slope.0 * dy + s.slope.1 * dx).clamp(0.05, 1.0);
                seg[y * w + x] = s.kind.class();
                depth[y * w + x] = d;
                let shade = 0.55 + 0.45 * d;
                for c in 0..ch {
                    img[(c * h + y) * w + x] = s.color[c] * shade;
                }
            }
        }
    }
    (img, seg, depth)
}

fn random_scene(spec: &DenseSpec, r: &mut rng::Rng) -> (Vec<f32>, Vec<SceneShape>) {
    let (h, w) = (spec.height as f32, spec.width as f32);
    let background: Vec<f32> = (0..spec.channels).map(|_| r.gen_range(0.1..0.35)).collect();
    let count = r.gen_range(2..=4);
    let kinds = &ShapeKind::ALL[..spec.seg_classes - 1];
    let side = h.min(w);
    let shapes = (0..count)
        .map(|_| {
            let radius = side * r.gen_range(0.12..0.22);
            SceneShape {
                kind: kinds[r.gen_range(0..kinds.len())],
                cy: r.gen_range(radius..h - radius),
                cx: r.gen_range(radius..w - radius),
                radius,
                color: (0..spec.channels).map(|_| r.gen_range(0.45..1.0)).collect(),
                depth: r.gen_range(0.3..0.9),
                slope: (r.gen_range(-0.03..0.03), r.gen_range(-0.03..0.03)),
            }
        })
        .collect();
    (background, shapes)
}

fn generate_split(spec: &DenseSpec, n: usize, split: Split, seed: u64) -> Result<DenseDataset> {
    let tag = match split {
        Split::Train => "dense/train",
        Split::Test => "dense/test",
    };
    let seed = rng::derive_seed(seed, tag);
    let (ch, h, w) = (spec.channels, spec.height, spec.width);
    let samples: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let (bg, shapes) = random_scene(spec, &mut r);
            let (mut img, seg, depth) = render_dense_scene(spec, &bg, &shapes);
            if spec.noise_level > 0.0 {
                let noise = Normal::new(0.0, spec.noise_level).expect("validated noise level");
                for v in &mut img {
                    *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
                }
            }
            (img, seg, depth)
        })
        .collect();
    let mut images = Vec::with_capacity(n * ch * h * w);
    let mut segs = Vec::with_capacity(n * h * w);
    let mut depths = Vec::with_capacity(n * h * w);
    for (img, seg, depth) in samples {
        images.extend(img);
        segs.extend(seg);
        depths.extend(depth);
    }
    DenseDataset::new(
        Tensor::new([n, ch, h, w], images)?,
        segs,
        spec.seg_classes,
        Tensor::new([n, 1, h, w], depths)?,
        split,
    )
}

/// Deterministic train/test pair of dense scenes.
pub fn generate_dense_mtl(spec: &DenseSpec, seed: u64) -> Result<(DenseDataset, DenseDataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, spec.n_train, Split::Train, seed)?,
        generate_split(spec, spec.test_size(), Split::Test, seed)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskData;

    #[test]
    fn seg_values_in_range_and_deterministic() {
        let spec = DenseSpec {
            n_train: 40,
            ..DenseSpec::default()
        };
        let (a, t) = generate_dense_mtl(&spec, 3).unwrap();
        let (b, _) = generate_dense_mtl(&spec, 3).unwrap();
        assert_eq!(a.images().shape(), &[40, 3, 32, 32]);
        assert_eq!(t.len(), 10);
        assert!(a.seg().iter().all(|&s| s < 4));
        assert!(a.seg().iter().any(|&s| s > 0));
        assert!(a.images().bit_eq(b.images()));
        assert!(a.reg().bit_eq(b.reg()));
    }

    #[test]
    fn background_only_scene_is_empty() {
        let spec = DenseSpec::default();
        let (_, seg, depth) = render_dense_scene(&spec, &[0.2, 0.2, 0.2], &[]);
        assert!(seg.iter().all(|&s| s == 0));
        assert!(depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn rejects_non_multiple_of_four() {
        let spec = DenseSpec {
            height: 30,
            ..DenseSpec::default()
        };
        assert!(generate_dense_mtl(&spec, 0).is_err());
    }
}
