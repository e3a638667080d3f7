//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use super::MtlModel;
use crate::data::{TaskData, TaskKind, Targets};
use crate::error::Result;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskMetrics {
    Classification { accuracy: f64 },
    Segmentation { miou: f64, pixel_accuracy: f64 },
    Regression { abs_err: f64, rel_err: f64 },
}

impl TaskMetrics {
    /// Accuracy-like score in [0,1], if the task has one.
    pub fn accuracy(&self) -> Option<f64> {
        match *self {
            TaskMetrics::Classification { accuracy } => Some(accuracy),
            TaskMetrics::Segmentation { pixel_accuracy, .. } => Some(pixel_accuracy),
            TaskMetrics::Regression { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskMetrics>,
    /// Mean accuracy over tasks that have one.
    pub avg_accuracy: f64,
}

impl EvalReport {
    pub fn from_tasks(tasks: Vec<TaskMetrics>) -> Self {
        let acc: Vec<f64> = tasks.iter().filter_map(TaskMetrics::accuracy).collect();
        let avg_accuracy = if acc.is_empty() {
            f64::NAN
        } else {
            acc.iter().sum::<f64>() / acc.len() as f64
        };
        Self { tasks, avg_accuracy }
    }
}

/// Arg-max over the class axis of `[B,C]` or `[B,C,H,W]` logits, one entry per position.
pub fn argmax_classes(logits: &Tensor<f32>) -> Vec<usize> {
    let s = logits.shape();
    let (b, c, spatial) = (s[0], s[1], s[2..].iter().product::<usize>());
    let d = logits.data();
    let mut out = Vec::with_capacity(b * spatial);
    for i in 0..b {
        for p in 0..spatial {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * spatial + p] > d[(i * c + best) * spatial + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

/// Mean IoU over classes that occur in either map.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[t] += 1;
            union[t] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    ious.iter().sum::<f64>() / ious.len().max(1) as f64
}

/// Mean absolute error over all pixels, and mean relative error over pixels with positive ground truth.
pub fn depth_errors(pred: &[f32], truth: &[f32]) -> (f64, f64) {
    let abs = pred.iter().zip(truth).map(|(p, t)| (p - t).abs() as f64).sum::<f64>() / truth.len().max(1) as f64;
    let (rel_sum, rel_n) = pred
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > 0.0)
        .fold((0.0, 0usize), |(s, n), (p, t)| (s + ((p - t).abs() / t) as f64, n + 1));
    (abs, if rel_n == 0 { 0.0 } else { rel_sum / rel_n as f64 })
}

/// Raw per-task predictions over a whole dataset.
pub enum Prediction {
    Classes(Vec<usize>),
    Field(Vec<f32>),
}

pub fn predict<D: TaskData>(model: &MtlModel, data: &D) -> Result<Vec<Prediction>> {
    let kinds = model.task_kinds().to_vec();
    let mut preds: Vec<Prediction> = kinds
        .iter()
        .map(|k| match k {
            TaskKind::Regression => Prediction::Field(Vec::new()),
            _ => Prediction::Classes(Vec::new()),
        })
        .collect();
    let n = data.len();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let (g, out) = model.infer(&data.images().select_rows(&idx)?)?;
        for (p, &h) in preds.iter_mut().zip(&out.heads) {
            match p {
                Prediction::Classes(v) => v.extend(argmax_classes(g.value(h))),
                Prediction::Field(v) => v.extend_from_slice(g.value(h).data()),
            }
        }
    }
    Ok(preds)
}

/// Per-task metrics of `model` on `data`.
pub fn evaluate_model<D: TaskData>(model: &MtlModel, data: &D) -> Result<EvalReport> {
    super::train::check_compatible(model, data)?;
    let preds = predict(model, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let tasks = model
        .task_kinds()
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(k, (kind, p))| match (kind, p, data.targets(k, &all)) {
            (TaskKind::Classification { .. }, Prediction::Classes(p), Targets::Classes(y)) => TaskMetrics::Classification { accuracy: accuracy(p, &y) },
            (TaskKind::Segmentation { classes }, Prediction::Classes(p), Targets::Pixels(y)) => TaskMetrics::Segmentation {
                miou: mean_iou(p, &y, *classes),
                pixel_accuracy: accuracy(p, &y),
            },
            (TaskKind::Regression, Prediction::Field(p), Targets::Field(y)) => {
                let (abs_err, rel_err) = depth_errors(p, y.data());
                TaskMetrics::Regression { abs_err, rel_err }
            }
            _ => unreachable!("predictions follow task kinds"),
        })
        .collect();
    Ok(EvalReport::from_tasks(tasks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_and_constant_predictors() {
        let y = vec![0, 1, 1, 0, 1, 0];
        assert_eq!(accuracy(&y, &y), 1.0);
        assert_eq!(accuracy(&[0; 6], &y), 0.5);
    }

    #[test]
    fn miou_identity_and_disjoint() {
        let y = vec![0, 0, 1, 2, 2, 3];
        assert_eq!(mean_iou(&y, &y, 4), 1.0);
        // classes 0 and 1 each lose position 0: IoU 1/2; classes 2 and 3 are exact
        let p = vec![1, 0, 1, 2, 2, 3];
        let want = (1.0 / 2.0 + 1.0 / 2.0 + 1.0 + 1.0) / 4.0;
        assert!((mean_iou(&p, &y, 4) - want).abs() < 1e-12);
    }

    #[test]
    fn argmax_over_dense_logits() {
        // class planes (0.1, 0.9) and (0.5, 0.2)
        let t = Tensor::new([1, 2, 1, 2], vec![0.1, 0.9, 0.5, 0.2]).unwrap();
        assert_eq!(argmax_classes(&t), vec![1, 0]);
    }

    #[test]
    fn depth_errors_ignore_background_for_relative() {
        let (a, r) = depth_errors(&[0.5, 0.1], &[0.5, 0.0]);
        assert!((a - 0.05).abs() < 1e-7);
        assert_eq!(r, 0.0);
    }
}
