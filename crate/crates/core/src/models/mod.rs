//! Hard-parameter-sharing models: one shared convolutional encoder, one head per task.

pub mod checkpoint;
pub mod eval;
pub mod train;
pub mod weighting;

use rand::distributions::{Distribution, Uniform};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, model_hash, save_model, ModelManifest};
pub use eval::{evaluate_model, EvalReport, TaskMetrics};
pub use train::{task_losses, train_model, train_model_with, EpochRecord, TrainHistory, TrainHyper};
pub use weighting::{weighted_mtl_loss, Strategy, WeightingState};

use crate::autodiff::{Graph, Var};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// One 3×3 convolution + ReLU block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Block {
    pub width: usize,
    pub stride: usize,
}

/// Architecture descriptor.
///
/// Classification models pool the encoder output globally and apply a linear head
/// per task. Dense models run `decoder` stages (nearest ×2 upsample then 3×3 conv +
/// ReLU) to get back to input resolution, followed by a 1×1 conv head per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub encoder: Vec<Block>,
    #[serde(default)]
    pub decoder: Vec<usize>,
}

impl Arch {
    /// Four stride-2 blocks of width 16/32/64/128, pooled to a 128-d feature.
    pub fn classification_default() -> Self {
        Self {
            encoder: [16, 32, 64, 128].map(|width| Block { width, stride: 2 }).to_vec(),
            decoder: vec![],
        }
    }

    pub fn dense_default() -> Self {
        Self {
            encoder: vec![
                Block { width: 16, stride: 1 },
                Block { width: 32, stride: 2 },
                Block { width: 64, stride: 2 },
            ],
            decoder: vec![32, 16],
        }
    }

    pub fn feature_dim(&self, in_channels: usize) -> usize {
        self.encoder.last().map_or(in_channels, |b| b.width)
    }

    fn downsampling(&self) -> usize {
        self.encoder.iter().map(|b| b.stride).product()
    }

    fn validate(&self, kinds: &[TaskKind]) -> Result<()> {
        if self.encoder.iter().any(|b| b.width == 0 || !(b.stride == 1 || b.stride == 2)) {
            return Err(Error::invalid("encoder blocks need positive width and stride 1 or 2"));
        }
        if self.decoder.contains(&0) {
            return Err(Error::invalid("decoder widths must be positive"));
        }
        let dense = kinds.iter().any(TaskKind::is_dense);
        if dense && kinds.iter().any(|k| !k.is_dense()) {
            return Err(Error::invalid("a model cannot mix per-image and per-pixel tasks"));
        }
        if dense && 1usize << self.decoder.len() != self.downsampling() {
            return Err(Error::invalid(format!(
                "dense model: {} decoder stages cannot undo ×{} downsampling",
                self.decoder.len(),
                self.downsampling()
            )));
        }
        if !dense && !self.decoder.is_empty() {
            return Err(Error::invalid("classification models take no decoder stages"));
        }
        Ok(())
    }
}

/// Name, shape and fan-in of every parameter, in registration order.
fn layout(arch: &Arch, in_channels: usize, kinds: &[TaskKind]) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: String, cin: usize, cout: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k));
        out.push((format!("{name}.bias"), vec![cout], 0));
    };
    let mut c = in_channels;
    for (i, b) in arch.encoder.iter().enumerate() {
        conv(&mut out, format!("encoder.{i}"), c, b.width, 3);
        c = b.width;
    }
    for (i, &w) in arch.decoder.iter().enumerate() {
        conv(&mut out, format!("decoder.{i}"), c, w, 3);
        c = w;
    }
    for (k, kind) in kinds.iter().enumerate() {
        let outs = kind.classes().unwrap_or(1);
        match kind {
            TaskKind::Classification { .. } => {
                out.push((format!("head.{k}.weight"), vec![outs, c], c));
                out.push((format!("head.{k}.bias"), vec![outs], 0));
            }
            _ => conv(&mut out, format!("head.{k}"), c, outs, 1),
        }
    }
    out
}

/// Shared encoder with per-task heads. Parameters are held in `f32` and cast into a
/// graph of any precision for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MtlModel {
    arch: Arch,
    in_channels: usize,
    kinds: Vec<TaskKind>,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// Pooled encoder features `[B,D]` (classification) or trunk features `[B,D,H,W]` (dense).
    pub features: Var,
    /// One output per task: logits `[B,C]`, per-pixel logits `[B,C,H,W]` or a field `[B,1,H,W]`.
    pub heads: Vec<Var>,
}

impl MtlModel {
    /// Kaiming-uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn new(arch: Arch, in_channels: usize, kinds: Vec<TaskKind>, seed: u64) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::invalid("a model needs at least one task"));
        }
        if in_channels == 0 {
            return Err(Error::invalid("input channels must be positive"));
        }
        arch.validate(&kinds)?;
        let mut r = rng::stream(rng::derive_seed(seed, "model-init"), 0);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, fan_in) in layout(&arch, in_channels, &kinds) {
            let t = if fan_in == 0 {
                Tensor::zeros(shape)
            } else {
                let bound = (6.0 / fan_in as f32).sqrt();
                let u = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(shape, |_| u.sample(&mut r))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            arch,
            in_channels,
            kinds,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(arch: Arch, in_channels: usize, kinds: Vec<TaskKind>, params: Vec<Tensor<f32>>) -> Result<Self> {
        let fresh = Self::new(arch, in_channels, kinds, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", fresh.params.len(), params.len())));
        }
        for (name, (a, b)) in fresh.names.iter().zip(fresh.params.iter().zip(&params)) {
            if a.shape() != b.shape() {
                return Err(Error::shape("model parameters", format!("{name}: {:?} vs {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        &self.kinds
    }

    pub fn num_tasks(&self) -> usize {
        self.kinds.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim(self.in_channels)
    }

    fn is_dense(&self) -> bool {
        self.kinds[0].is_dense()
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn register<T: Float>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.cast(), trainable)).collect()
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Outputs> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape("model forward", format!("input {s:?}, model expects {} channels", self.in_channels)));
        }
        let mut it = p.iter().copied();
        let mut next = || it.next().expect("parameter list matches layout");
        let mut h = x;
        for b in &self.arch.encoder {
            let (w, bias) = (next(), next());
            h = g.conv2d(h, w, Some(bias), b.stride, 1)?;
            h = g.relu(h);
        }
        if self.is_dense() {
            for _ in &self.arch.decoder {
                let (w, bias) = (next(), next());
                h = g.upsample_nearest2x(h)?;
                h = g.conv2d(h, w, Some(bias), 1, 1)?;
                h = g.relu(h);
            }
            let heads = self
                .kinds
                .iter()
                .map(|_| {
                    let (w, bias) = (next(), next());
                    g.conv2d(h, w, Some(bias), 1, 0)
                })
                .collect::<Result<_>>()?;
            return Ok(Outputs { features: h, heads });
        }
        let features = g.global_avg_pool(h)?;
        let heads = self
            .kinds
            .iter()
            .map(|_| {
                let (w, bias) = (next(), next());
                g.linear(features, w, Some(bias))
            })
            .collect::<Result<_>>()?;
        Ok(Outputs { features, heads })
    }

    /// Forward pass on a constant batch in `f32`.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<(Graph<f32>, Outputs)> {
        let mut g = Graph::new();
        let p = self.register(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &p, xv)?;
        Ok((g, out))
    }

    /// Pooled encoder features of every sample, `[N,D]`.
    pub fn features(&self, images: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
        if self.is_dense() {
            return Err(Error::invalid("pooled features are defined for classification models"));
        }
        let n = images.shape()[0];
        let mut rows = Vec::with_capacity(n * self.feature_dim());
        for start in (0..n).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let (g, out) = self.infer(&images.select_rows(&idx)?)?;
            rows.extend_from_slice(g.value(out.features).data());
        }
        Tensor::new([n, self.feature_dim()], rows)
    }

    /// Bit-level equality of every parameter.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params.len() == other.params.len() && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }
}

pub fn build_mtl_model(arch: Arch, in_channels: usize, kinds: &[TaskKind], seed: u64) -> Result<MtlModel> {
    MtlModel::new(arch, in_channels, kinds.to_vec(), seed)
}

/// Closed-form parameter count of an architecture.
pub fn param_count(arch: &Arch, in_channels: usize, kinds: &[TaskKind]) -> usize {
    layout(arch, in_channels, kinds)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}
