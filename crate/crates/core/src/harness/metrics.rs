//! Intra-class spread of learned features.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative std.
pub const MEAN_FLOOR: f64 = 1e-6;

/// Average relative intra-class std of `features [N,D]`.
///
/// For each task `k`, class `c` and dimension `d`: population std of `z_d` over the
/// samples of class `c`, divided by `max(|mean|, 1e-6)`. These are summed over classes
/// and tasks and divided by `Σ C_k`, giving one value per dimension; the result is the
/// (mean, max) over dimensions. `labels` is row-major `[N,K]`.
pub fn intra_class_relative_std(features: &Tensor<f32>, labels: &[usize], class_counts: &[usize]) -> Result<(f64, f64)> {
    if features.ndim() != 2 {
        return Err(Error::shape("intra_class_relative_std", format!("features must be [N,D], got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let k = class_counts.len();
    if n < 2 || d == 0 || k == 0 || labels.len() != n * k {
        return Err(Error::shape("intra_class_relative_std", format!("{n} samples, {d} dims, {} labels for {k} tasks", labels.len())));
    }
    let total_classes: usize = class_counts.iter().sum();
    let mut per_dim = vec![0f64; d];
    for (t, &classes) in class_counts.iter().enumerate() {
        let mut sum = vec![0f64; classes * d];
        let mut sq = vec![0f64; classes * d];
        let mut count = vec![0usize; classes];
        for i in 0..n {
            let c = labels[i * k + t];
            if c >= classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes,
                    context: format!("task {t}"),
                });
            }
            count[c] += 1;
            for (j, &v) in features.row(i).iter().enumerate() {
                sum[c * d + j] += v as f64;
            }
        }
        if let Some(c) = count.iter().position(|&m| m == 0) {
            return Err(Error::invalid(format!("task {t} class {c} has no samples")));
        }
        for i in 0..n {
            let c = labels[i * k + t];
            for (j, &v) in features.row(i).iter().enumerate() {
                let dev = v as f64 - sum[c * d + j] / count[c] as f64;
                sq[c * d + j] += dev * dev;
            }
        }
        for c in 0..classes {
            for j in 0..d {
                let mean = sum[c * d + j] / count[c] as f64;
                let std = (sq[c * d + j] / count[c] as f64).sqrt();
                per_dim[j] += std / mean.abs().max(MEAN_FLOOR);
            }
        }
    }
    let per_dim: Vec<f64> = per_dim.into_iter().map(|v| v / total_classes as f64).collect();
    let avg = per_dim.iter().sum::<f64>() / d as f64;
    let max = per_dim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((avg, max))
}
