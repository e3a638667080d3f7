//! Partial data protection: only a fraction of the training set is poisoned.

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Indices (sorted) of the `round(r·N)` samples that take poisoned images.
pub fn poisoned_indices(n: usize, r: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::validation("mix_ratio", format!("must lie in [0, 1], got {r}")));
    }
    let m = (r * n as f64).round() as usize;
    let mut rr = rng::stream(seed, 0);
    let mut idx = rng::permutation(n, &mut rr);
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// `clean` with a seeded random `round(r·N)` subset of images taken from `poisoned`.
/// Labels and sample order are those of `clean`.
pub fn mix_partial<D: TaskData>(clean: &D, poisoned: &D, r: f64, seed: u64) -> Result<D> {
    if clean.images().shape() != poisoned.images().shape() || clean.task_kinds() != poisoned.task_kinds() {
        return Err(Error::shape("mix_partial", "clean and poisoned sets are not aligned"));
    }
    let all: Vec<usize> = (0..clean.len()).collect();
    for k in 0..clean.num_tasks() {
        if clean.targets(k, &all) != poisoned.targets(k, &all) {
            return Err(Error::invalid(format!("clean and poisoned labels differ on task {k}")));
        }
    }
    let idx = poisoned_indices(clean.len(), r, seed)?;
    let mut images: Tensor<f32> = clean.images().clone();
    for &i in &idx {
        images.row_mut(i).copy_from_slice(poisoned.images().row(i));
    }
    clean.with_images(images)
}
