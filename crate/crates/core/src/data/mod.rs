//! Multi-task datasets: in-memory types, synthetic generators and on-disk formats.

pub mod container;
mod dense;
pub mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

pub use dense::{generate_dense_mtl, render_dense_scene, DenseSpec, SceneShape, ShapeKind};
pub use synth::{generate_classification_mtl, grid_side, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// What a task predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskKind {
    /// One label per image.
    Classification { classes: usize },
    /// One label per pixel.
    Segmentation { classes: usize },
    /// One real value per pixel.
    Regression,
}

impl TaskKind {
    pub fn classes(&self) -> Option<usize> {
        match *self {
            TaskKind::Classification { classes } | TaskKind::Segmentation { classes } => Some(classes),
            TaskKind::Regression => None,
        }
    }

    pub fn is_dense(&self) -> bool {
        !matches!(self, TaskKind::Classification { .. })
    }
}

/// Supervision for one task over a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `[B,H,W]` class indices.
    Pixels(Vec<usize>),
    /// `[B,1,H,W]` regression field.
    Field(Tensor<f32>),
}

/// Common view over classification and dense datasets used by training, crafting and
/// evaluation code.
pub trait TaskData: Clone + Send + Sync {
    fn images(&self) -> &Tensor<f32>;

    fn task_kinds(&self) -> Vec<TaskKind>;

    fn targets(&self, task: usize, idx: &[usize]) -> Targets;

    /// Same labels with replaced images.
    fn with_images(&self, images: Tensor<f32>) -> Result<Self>;

    fn len(&self) -> usize {
        self.images().shape()[0]
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn num_tasks(&self) -> usize {
        self.task_kinds().len()
    }

    fn image_dims(&self) -> [usize; 3] {
        let s = self.images().shape();
        [s[1], s[2], s[3]]
    }
}

fn check_images(images: &Tensor<f32>) -> Result<()> {
    if images.ndim() != 4 {
        return Err(Error::shape("dataset", format!("images must be [N,C,H,W], got {:?}", images.shape())));
    }
    if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("image value {v} outside [0,1]")));
    }
    Ok(())
}

/// Images with `K` classification labels each.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDataset {
    images: Tensor<f32>,
    /// Row-major `[N,K]`.
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    pub split: Split,
}

impl MultiTaskDataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_counts: Vec<usize>, split: Split) -> Result<Self> {
        check_images(&images)?;
        let n = images.shape()[0];
        let k = class_counts.len();
        if k == 0 {
            return Err(Error::invalid("dataset needs at least one task"));
        }
        if let Some(c) = class_counts.iter().find(|&&c| c < 2) {
            return Err(Error::invalid(format!("every task needs at least 2 classes, got {c}")));
        }
        if labels.len() != n * k {
            return Err(Error::shape("dataset", format!("{} labels for {n} samples x {k} tasks", labels.len())));
        }
        for (i, &y) in labels.iter().enumerate() {
            let classes = class_counts[i % k];
            if y >= classes {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes,
                    context: format!("sample {} task {}", i / k, i % k),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            class_counts,
            split,
        })
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn label(&self, sample: usize, task: usize) -> usize {
        self.labels[sample * self.class_counts.len() + task]
    }

    /// All labels of one sample, one per task.
    pub fn sample_labels(&self, sample: usize) -> &[usize] {
        let k = self.class_counts.len();
        &self.labels[sample * k..(sample + 1) * k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn task_labels(&self, task: usize) -> Vec<usize> {
        (0..self.len()).map(|i| self.label(i, task)).collect()
    }

    /// Keeps only the given tasks, in the given order.
    pub fn select_tasks(&self, tasks: &[usize]) -> Result<Self> {
        if tasks.iter().any(|&t| t >= self.class_counts.len()) {
            return Err(Error::invalid(format!("task index out of range in {tasks:?}")));
        }
        let labels = (0..self.len())
            .flat_map(|i| tasks.iter().map(move |&t| (i, t)))
            .map(|(i, t)| self.label(i, t))
            .collect();
        let counts = tasks.iter().map(|&t| self.class_counts[t]).collect();
        Self::new(self.images.clone(), labels, counts, self.split)
    }

    /// Subset of samples, in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(idx)?;
        let labels = idx.iter().flat_map(|&i| self.sample_labels(i).iter().copied()).collect();
        Self::new(images, labels, self.class_counts.clone(), self.split)
    }
}

impl TaskData for MultiTaskDataset {
    fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    fn task_kinds(&self) -> Vec<TaskKind> {
        self.class_counts
            .iter()
            .map(|&classes| TaskKind::Classification { classes })
            .collect()
    }

    fn targets(&self, task: usize, idx: &[usize]) -> Targets {
        Targets::Classes(idx.iter().map(|&i| self.label(i, task)).collect())
    }

    fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::shape("with_images", format!("{:?} vs {:?}", images.shape(), self.images.shape())));
        }
        Self::new(images, self.labels.clone(), self.class_counts.clone(), self.split)
    }
}

/// Images with a per-pixel segmentation map and a per-pixel regression field.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseDataset {
    images: Tensor<f32>,
    /// Row-major `[N,H,W]`.
    seg: Vec<usize>,
    seg_classes: usize,
    /// `[N,1,H,W]`.
    reg: Tensor<f32>,
    pub split: Split,
}

impl DenseDataset {
    pub fn new(images: Tensor<f32>, seg: Vec<usize>, seg_classes: usize, reg: Tensor<f32>, split: Split) -> Result<Self> {
        check_images(&images)?;
        let s = images.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        if seg.len() != n * h * w {
            return Err(Error::shape("dense dataset", format!("{} seg labels for {n}x{h}x{w}", seg.len())));
        }
        if seg_classes < 2 {
            return Err(Error::invalid("segmentation needs at least 2 classes"));
        }
        if let Some(&y) = seg.iter().find(|&&y| y >= seg_classes) {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: seg_classes,
                context: "segmentation map".into(),
            });
        }
        if reg.shape() != [n, 1, h, w] {
            return Err(Error::shape("dense dataset", format!("regression field {:?}", reg.shape())));
        }
        if !reg.is_finite() {
            return Err(Error::NonFinite("regression labels"));
        }
        Ok(Self {
            images,
            seg,
            seg_classes,
            reg,
            split,
        })
    }

    pub fn seg_classes(&self) -> usize {
        self.seg_classes
    }

    pub fn seg(&self) -> &[usize] {
        &self.seg
    }

    pub fn reg(&self) -> &Tensor<f32> {
        &self.reg
    }

    fn plane(&self) -> usize {
        let s = self.images.shape();
        s[2] * s[3]
    }
}

impl TaskData for DenseDataset {
    fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    fn task_kinds(&self) -> Vec<TaskKind> {
        vec![
            TaskKind::Segmentation {
                classes: self.seg_classes,
            },
            TaskKind::Regression,
        ]
    }

    fn targets(&self, task: usize, idx: &[usize]) -> Targets {
        let plane = self.plane();
        match task {
            0 => Targets::Pixels(
                idx.iter()
                    .flat_map(|&i| self.seg[i * plane..(i + 1) * plane].iter().copied())
                    .collect(),
            ),
            _ => Targets::Field(self.reg.select_rows(idx).expect("indices come from this dataset")),
        }
    }

    fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        if images.shape() != self.images.shape() {
            return Err(Error::shape("with_images", format!("{:?} vs {:?}", images.shape(), self.images.shape())));
        }
        Self::new(images, self.seg.clone(), self.seg_classes, self.reg.clone(), self.split)
    }
}
