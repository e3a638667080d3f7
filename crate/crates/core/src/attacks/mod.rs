//! Baseline unlearnable-example attacks adapted to multi-task data, plus the shared
//! perturbation bookkeeping (bounds, perturbation sets, poisoning).

pub mod em;
pub mod patterns;
pub mod pgd;
pub mod tap;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use em::{craft_em, EmConfig, EmOutcome, SurrogateConfig};
pub use patterns::{
    craft_classwise, fuse_average, fuse_patch, make_classwise_patterns, patch_grid, target_label, Geometry, PatchGrid,
    PatternBank, PatternKind, PatternSpec,
};
pub use pgd::{pgd, pgd_ensemble, Direction, PgdConfig, PgdMode};
pub use tap::{craft_tap_sep, train_checkpoints, TapConfig};

use crate::data::container::{self, Payload};
use crate::data::manifest::{read_ref, write_bytes, FileRef};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default ℓ∞ budget, 8/255.
pub const DEFAULT_EPS: f32 = 8.0 / 255.0;

/// Per-sample norm constraint on a perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Bound {
    Linf { eps: f32 },
    L2 { radius: f32 },
}

impl Bound {
    /// ℓ2 radius `1 × (H/32) × (W/32)`.
    pub fn l2_for_image(h: usize, w: usize) -> Self {
        Bound::L2 {
            radius: (h as f32 / 32.0) * (w as f32 / 32.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Bound::Linf { eps } => eps,
            Bound::L2 { radius } => radius,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::validation("epsilon", format!("bound must be positive and finite, got {v}")));
        }
        Ok(())
    }

    pub(crate) fn l2_radius(&self) -> f64 {
        match *self {
            Bound::L2 { radius } => radius as f64,
            Bound::Linf { .. } => f64::INFINITY,
        }
    }

    /// Projects one sample's perturbation onto the bound.
    pub fn project(&self, d: &mut [f32]) {
        match *self {
            Bound::Linf { eps } => d.iter_mut().for_each(|v| *v = v.clamp(-eps, eps)),
            Bound::L2 { .. } => patterns::project_l2(d, self.l2_radius()),
        }
    }

    /// Exact membership test for one sample.
    pub fn contains(&self, d: &[f32]) -> bool {
        match *self {
            Bound::Linf { eps } => d.iter().all(|v| v.abs() <= eps),
            Bound::L2 { radius } => d.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() <= radius as f64,
        }
    }
}

/// One perturbation per training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSet {
    pub deltas: Tensor<f32>,
    pub bound: Bound,
    pub method: String,
    pub seed: u64,
    pub surrogate_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSidecar {
    pub bound: Bound,
    pub method: String,
    pub seed: u64,
    pub surrogate_hash: Option<String>,
    pub config_hash: String,
    pub deltas: FileRef,
}

impl PerturbationSet {
    pub fn new(deltas: Tensor<f32>, bound: Bound, method: impl Into<String>, seed: u64) -> Result<Self> {
        let set = Self {
            deltas,
            bound,
            method: method.into(),
            seed,
            surrogate_hash: None,
        };
        set.check_bound()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.deltas.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the first sample violating the bound, if any.
    pub fn first_violation(&self) -> Option<usize> {
        (0..self.len()).find(|&i| !self.bound.contains(self.deltas.row(i)))
    }

    pub fn check_bound(&self) -> Result<()> {
        match self.first_violation() {
            None => Ok(()),
            Some(i) => Err(Error::invalid(format!("perturbation {i} violates {:?}", self.bound))),
        }
    }

    pub fn save(&self, dir: &Path, name: &str, config_hash: &str) -> Result<PathBuf> {
        let deltas = write_bytes(dir, &format!("{name}.mtue"), &container::encode_f32(&self.deltas)?)?;
        let side = PerturbationSidecar {
            bound: self.bound,
            method: self.method.clone(),
            seed: self.seed,
            surrogate_hash: self.surrogate_hash.clone(),
            config_hash: config_hash.to_string(),
            deltas,
        };
        let path = dir.join(format!("{name}.json"));
        container::write_new(&path, serde_json::to_string_pretty(&side)?.as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: PerturbationSidecar = serde_json::from_str(&text)?;
        let Payload::F32(deltas) = read_ref(dir, &side.deltas)? else {
            return Err(Error::DtypeMismatch {
                expected: "f32",
                found: "i32",
            });
        };
        let set = Self {
            deltas,
            bound: side.bound,
            method: side.method,
            seed: side.seed,
            surrogate_hash: side.surrogate_hash,
        };
        set.check_bound()?;
        Ok(set)
    }
}

/// `clamp(x + δ, 0, 1)`, nudged toward `x` where rounding would leave `|result − x| > eps`.
pub(crate) fn bounded_add(x: f32, d: f32, eps: f32) -> f32 {
    let mut p = (x + d).clamp(0.0, 1.0);
    while (p as f64 - x as f64).abs() > eps as f64 {
        p = if p > x { next_down(p) } else { next_up(p) };
    }
    p
}

fn next_up(v: f32) -> f32 {
    if v >= 0.0 {
        f32::from_bits(v.to_bits() + 1)
    } else if v == -0.0 {
        f32::from_bits(1)
    } else {
        f32::from_bits(v.to_bits() - 1)
    }
}

fn next_down(v: f32) -> f32 {
    -next_up(-v)
}

/// `clamp(x + δ, 0, 1)` for every pixel. Under an ℓ∞ bound the result is guaranteed to
/// differ from `x` by at most ε; labels are untouched.
pub fn poison_images(images: &Tensor<f32>, deltas: &Tensor<f32>, bound: Bound) -> Result<Tensor<f32>> {
    if images.shape() != deltas.shape() {
        return Err(Error::shape("poison", format!("images {:?} vs perturbations {:?}", images.shape(), deltas.shape())));
    }
    let eps = match bound {
        Bound::Linf { eps } => eps,
        Bound::L2 { .. } => f32::INFINITY,
    };
    images.zip_with(deltas, "poison", |x, d| bounded_add(x, d, eps))
}

/// Clean-label poisoned copy of `data`.
pub fn poison_dataset<D: TaskData>(data: &D, set: &PerturbationSet) -> Result<D> {
    data.with_images(poison_images(data.images(), &set.deltas, set.bound)?)
}
