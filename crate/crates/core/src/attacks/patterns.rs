//! Surrogate-free class-wise patterns and the two ways of fusing them across tasks.

use rand::Rng as _;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::Bound;
use crate::autodiff::kernels;
use crate::data::{MultiTaskDataset, TaskData};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Square grid of task patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub tasks: usize,
}

impl PatchGrid {
    /// Top-left corner of task `k`'s patch (row-major placement).
    pub fn origin(&self, k: usize) -> (usize, usize) {
        ((k / self.n) * self.patch_h, (k % self.n) * self.patch_w)
    }

    /// Height and width of the assembled canvas before resizing.
    pub fn canvas(&self) -> (usize, usize) {
        (self.n * self.patch_h, self.n * self.patch_w)
    }
}

/// `N = 2^⌈log2⌈√K⌉⌉`, patches of `H//N × W//N`.
pub fn patch_grid(tasks: usize, h: usize, w: usize) -> Result<PatchGrid> {
    if tasks == 0 {
        return Err(Error::invalid("patch grid needs at least one task"));
    }
    let n = crate::data::grid_side(tasks);
    if h < n || w < n {
        return Err(Error::invalid(format!("{h}x{w} image too small for a {n}x{n} patch grid")));
    }
    Ok(PatchGrid {
        n,
        patch_h: h / n,
        patch_w: w / n,
        tasks,
    })
}

/// `(y + C//2) mod C`.
pub fn target_label(y: usize, classes: usize) -> usize {
    (y + classes / 2) % classes
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum PatternKind {
    /// Random axis-aligned coloured blocks on a coarse grid.
    #[default]
    Blocks,
    /// Smooth low-frequency noise (bilinearly upsampled coarse noise).
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    /// Every pattern covers the whole image; fused by averaging.
    Full,
    /// Every pattern covers one grid patch; fused by placement then resize.
    Patch { grid: PatchGrid },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub bound: Bound,
}

/// Per task, per class, one pattern of shape `[Ch,h,w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternBank {
    pub patterns: Vec<Vec<Tensor<f32>>>,
    pub geometry: Geometry,
    pub bound: Bound,
    pub image_dims: [usize; 3],
}

fn coarse_cells(side: usize) -> usize {
    (side / 4).clamp(1, 4)
}

fn raw_pattern(kind: PatternKind, ch: usize, h: usize, w: usize, r: &mut rng::Rng) -> Vec<f32> {
    let (ch_, cw) = (coarse_cells(h), coarse_cells(w));
    let coarse: Vec<f32> = (0..ch * ch_ * cw).map(|_| r.gen_range(-1.0f32..=1.0)).collect();
    match kind {
        PatternKind::Blocks => {
            let mut out = vec![0f32; ch * h * w];
            for c in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        let (cy, cx) = (y * ch_ / h, x * cw / w);
                        out[(c * h + y) * w + x] = coarse[(c * ch_ + cy) * cw + cx];
                    }
                }
            }
            out
        }
        PatternKind::Noise => {
            let mut out = vec![0f32; ch * h * w];
            kernels::bilinear_forward(&coarse, ch, (ch_, cw), (h, w), &mut out);
            out
        }
    }
}

/// Rescales `p` so that it meets `bound` with equality (a zero pattern stays zero).
fn scale_to_bound(p: &mut [f32], bound: Bound) {
    match bound {
        Bound::Linf { eps } => {
            let m = p.iter().fold(0f32, |m, v| m.max(v.abs()));
            if m > 0.0 {
                for v in p.iter_mut() {
                    *v = (*v / m * eps).clamp(-eps, eps);
                }
            }
        }
        Bound::L2 { .. } => {
            let n = p.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if n > 0.0 {
                let s = bound.l2_radius() / n;
                for v in p.iter_mut() {
                    *v = (*v as f64 * s) as f32;
                }
                project_l2(p, bound.l2_radius());
            }
        }
    }
}

/// Shrinks `p` onto the ℓ2 ball of radius `r` if it lies outside (checked in f64).
pub(crate) fn project_l2(p: &mut [f32], r: f64) {
    loop {
        let n = p.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n <= r {
            return;
        }
        let s = r / n * (1.0 - 1e-6);
        for v in p.iter_mut() {
            *v = (*v as f64 * s) as f32;
        }
    }
}

/// Deterministic class-wise pattern bank.
pub fn make_classwise_patterns(
    spec: &PatternSpec,
    geometry: Geometry,
    image_dims: [usize; 3],
    class_counts: &[usize],
    seed: u64,
) -> Result<PatternBank> {
    let [ch, h, w] = image_dims;
    let (ph, pw) = match geometry {
        Geometry::Full => (h, w),
        Geometry::Patch { grid } => {
            if grid != patch_grid(class_counts.len(), h, w)? {
                return Err(Error::invalid("patch grid does not match task count and image size"));
            }
            (grid.patch_h, grid.patch_w)
        }
    };
    spec.bound.validate()?;
    let base = rng::derive_seed(seed, "classwise-patterns");
    let patterns = class_counts
        .iter()
        .enumerate()
        .map(|(k, &classes)| {
            (0..classes)
                .map(|c| {
                    let mut r = rng::stream(base, (k as u64) << 32 | c as u64);
                    let mut p = raw_pattern(spec.kind, ch, ph, pw, &mut r);
                    scale_to_bound(&mut p, spec.bound);
                    Tensor::new([ch, ph, pw], p)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatternBank {
        patterns,
        geometry,
        bound: spec.bound,
        image_dims,
    })
}

fn check_labels(bank: &PatternBank, labels: &[usize]) -> Result<()> {
    if labels.len() != bank.patterns.len() {
        return Err(Error::invalid(format!("{} labels for {} tasks", labels.len(), bank.patterns.len())));
    }
    for (k, (&y, pats)) in labels.iter().zip(&bank.patterns).enumerate() {
        if y >= pats.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: pats.len(),
                context: format!("pattern bank task {k}"),
            });
        }
    }
    Ok(())
}

/// Mean of the selected full-image patterns.
pub fn fuse_average(bank: &PatternBank, labels: &[usize]) -> Result<Tensor<f32>> {
    if bank.geometry != Geometry::Full {
        return Err(Error::invalid("averaging fusion needs full-image patterns"));
    }
    check_labels(bank, labels)?;
    let k = labels.len() as f32;
    let mut out = Tensor::zeros(bank.image_dims.to_vec());
    for (&y, pats) in labels.iter().zip(&bank.patterns) {
        out.add_assign(&pats[y]);
    }
    Ok(out.map(|v| v / k))
}

/// Places each task's pattern in its patch, then resizes the canvas to `out_h × out_w`.
pub fn fuse_patch(bank: &PatternBank, labels: &[usize], out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let Geometry::Patch { grid } = bank.geometry else {
        return Err(Error::invalid("patch fusion needs per-patch patterns"));
    };
    check_labels(bank, labels)?;
    let ch = bank.image_dims[0];
    let (ch_h, ch_w) = grid.canvas();
    let mut canvas = vec![0f32; ch * ch_h * ch_w];
    for (k, (&y, pats)) in labels.iter().zip(&bank.patterns).enumerate() {
        let (oy, ox) = grid.origin(k);
        let p = pats[y].data();
        for c in 0..ch {
            for y in 0..grid.patch_h {
                let src = &p[(c * grid.patch_h + y) * grid.patch_w..][..grid.patch_w];
                canvas[(c * ch_h + oy + y) * ch_w + ox..][..grid.patch_w].copy_from_slice(src);
            }
        }
    }
    let mut out = vec![0f32; ch * out_h * out_w];
    if (ch_h, ch_w) == (out_h, out_w) {
        out.copy_from_slice(&canvas);
    } else {
        kernels::bilinear_forward(&canvas, ch, (ch_h, ch_w), (out_h, out_w), &mut out);
    }
    let mut out = Tensor::new([ch, out_h, out_w], out)?;
    bank.bound.project(out.data_mut());
    Ok(out)
}

/// Per-sample fused perturbations for a whole dataset.
pub fn craft_classwise(bank: &PatternBank, data: &MultiTaskDataset) -> Result<Tensor<f32>> {
    let [ch, h, w] = bank.image_dims;
    let rows = (0..data.len())
        .map(|i| match bank.geometry {
            Geometry::Full => fuse_average(bank, data.sample_labels(i)),
            Geometry::Patch { .. } => fuse_patch(bank, data.sample_labels(i), h, w),
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Tensor::stack(&rows)?;
    debug_assert_eq!(out.shape(), &[data.len(), ch, h, w]);
    Ok(out)
}
