//! Encoder / embedding-bank / decoder perturbation network.

use rand_distr::{Distribution, Uniform};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{TaskKind, Targets};
use crate::error::{Error, Result};
use crate::models::Block;
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Embedding entries start i.i.d. uniform in `[-EMBED_INIT, EMBED_INIT]`.
pub const EMBED_INIT: f32 = 0.05;
/// The last decoder layer starts this much smaller than a Kaiming init so that most
/// outputs begin inside the clip range instead of saturated.
const OUTPUT_INIT_SCALE: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GenArch {
    /// 3×3 conv + ReLU layers; exactly one has stride 2. The last width is the channel
    /// count of `z`. Dense-label embedders reuse this stack with the last width
    /// replaced by `embed_channels`.
    pub encoder: Vec<Block>,
    pub embed_channels: usize,
    /// Widths of the hidden transposed-conv layers; a final layer maps to the image
    /// channel count.
    pub decoder: Vec<usize>,
    /// Number of decoder layers run at half resolution before the ×2 upsample.
    pub upsample_after: usize,
}

impl Default for GenArch {
    fn default() -> Self {
        Self::standard()
    }
}

impl GenArch {
    /// Nine encoder layers (32,32,64,64,64,96,96,128,128), the first one strided,
    /// 16-channel embeddings and four transposed-conv decoder layers.
    pub fn standard() -> Self {
        Self::from_widths(&[32, 32, 64, 64, 64, 96, 96, 128, 128], 16, &[128, 64, 32])
    }

    /// Same depth and structure with every width halved (embeddings stay 16 channels).
    pub fn compact() -> Self {
        Self::from_widths(&[16, 16, 32, 32, 32, 48, 48, 64, 64], 16, &[64, 32, 16])
    }

    fn from_widths(enc: &[usize], embed_channels: usize, dec: &[usize]) -> Self {
        Self {
            encoder: enc
                .iter()
                .enumerate()
                .map(|(i, &width)| Block {
                    width,
                    stride: if i == 0 { 2 } else { 1 },
                })
                .collect(),
            embed_channels,
            decoder: dec.to_vec(),
            upsample_after: 2,
        }
    }

    pub fn z_channels(&self) -> usize {
        self.encoder.last().map_or(0, |b| b.width)
    }

    /// Channels entering the decoder for `k` tasks.
    pub fn decoder_in(&self, k: usize) -> usize {
        self.z_channels() + self.embed_channels * k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::validation("generator.arch", msg));
        if self.encoder.is_empty() || self.encoder.iter().any(|b| b.width == 0 || !(b.stride == 1 || b.stride == 2)) {
            return bad("encoder needs at least one layer, positive widths and strides of 1 or 2");
        }
        if self.encoder.iter().filter(|b| b.stride == 2).count() != 1 {
            return bad("encoder must downsample exactly once (one stride-2 layer)");
        }
        if self.embed_channels == 0 || self.decoder.contains(&0) {
            return bad("widths must be positive");
        }
        if self.upsample_after > self.decoder.len() + 1 || self.upsample_after == 0 {
            return bad("upsample_after must lie in 1..=decoder layers");
        }
        Ok(())
    }
}

/// Per-task flag: protected tasks use their true-label embedding, learnable tasks the
/// mean of their bank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtectionMask(pub Vec<bool>);

impl ProtectionMask {
    pub fn all(k: usize) -> Self {
        Self(vec![true; k])
    }

    /// Only the listed task indices are protected.
    pub fn only(k: usize, protected: &[usize]) -> Result<Self> {
        let mut m = vec![false; k];
        for &t in protected {
            if t >= k {
                return Err(Error::validation("protect", format!("task {t} does not exist ({k} tasks)")));
            }
            m[t] = true;
        }
        Ok(Self(m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_protected(&self, k: usize) -> bool {
        self.0[k]
    }
}

/// Graph handles of every generator parameter.
pub struct GenVars {
    pub(crate) all: Vec<Var>,
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
    tasks: Vec<TaskVars>,
}

enum TaskVars {
    Bank(Var),
    Embedder(Vec<(Var, Var)>),
}

impl GenVars {
    /// Embedding bank of task `k`, if it is a class-label task.
    pub fn bank(&self, k: usize) -> Option<Var> {
        match self.tasks.get(k)? {
            TaskVars::Bank(b) => Some(*b),
            TaskVars::Embedder(_) => None,
        }
    }

    pub fn banks(&self) -> Vec<Var> {
        (0..self.tasks.len()).filter_map(|k| self.bank(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbGenerator {
    arch: GenArch,
    image_dims: [usize; 3],
    kinds: Vec<TaskKind>,
    eps: f32,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
}

enum Init {
    Kaiming(usize),
    Zero,
    Embedding,
    Output(usize),
}

fn conv_stack(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, cin: usize, widths: impl Iterator<Item = usize>) {
    let mut c = cin;
    for (i, w) in widths.enumerate() {
        out.push((format!("{prefix}.{i}.weight"), vec![w, c, 3, 3], Init::Kaiming(c * 9)));
        out.push((format!("{prefix}.{i}.bias"), vec![w], Init::Zero));
        c = w;
    }
}

fn layout(arch: &GenArch, [c, h, w]: [usize; 3], kinds: &[TaskKind]) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    conv_stack(&mut out, "encoder", c, arch.encoder.iter().map(|b| b.width));
    let mut cin = arch.decoder_in(kinds.len());
    let n = arch.decoder.len();
    for (i, &wd) in arch.decoder.iter().chain(std::iter::once(&c)).enumerate() {
        let init = if i == n { Init::Output(cin * 9) } else { Init::Kaiming(cin * 9) };
        // transposed-conv kernels are [Cin, Cout, kh, kw]
        out.push((format!("decoder.{i}.weight"), vec![cin, wd, 3, 3], init));
        out.push((format!("decoder.{i}.bias"), vec![wd], Init::Zero));
        cin = wd;
    }
    let widths = |last: usize| arch.encoder.iter().enumerate().map(move |(i, b)| if i + 1 == arch.encoder.len() { last } else { b.width });
    for (k, kind) in kinds.iter().enumerate() {
        match kind {
            TaskKind::Classification { classes } => out.push((format!("bank.{k}"), vec![*classes, arch.embed_channels, h / 2, w / 2], Init::Embedding)),
            _ => conv_stack(&mut out, &format!("embedder.{k}"), 1, widths(arch.embed_channels)),
        }
    }
    out
}

impl PerturbGenerator {
    pub fn new(arch: GenArch, image_dims: [usize; 3], kinds: Vec<TaskKind>, eps: f32, seed: u64) -> Result<Self> {
        arch.validate()?;
        let [c, h, w] = image_dims;
        if c == 0 || h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::validation("generator.image_dims", format!("need positive channels and even sides ≥ 2, got {image_dims:?}")));
        }
        if kinds.is_empty() {
            return Err(Error::invalid("the generator needs at least one task"));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::validation("epsilon", "must be positive and finite"));
        }
        let mut r = rng::stream(rng::derive_seed(seed, "generator-init"), 0);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in layout(&arch, image_dims, &kinds) {
            let bound = match init {
                Init::Zero => 0.0,
                Init::Kaiming(fan) => (6.0 / fan as f32).sqrt(),
                Init::Output(fan) => (6.0 / fan as f32).sqrt() * OUTPUT_INIT_SCALE,
                Init::Embedding => EMBED_INIT,
            };
            let t = if bound == 0.0 {
                Tensor::zeros(shape)
            } else {
                let u = Uniform::new_inclusive(-bound, bound);
                Tensor::from_fn(shape, |_| u.sample(&mut r))
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            arch,
            image_dims,
            kinds,
            eps,
            names,
            params,
        })
    }

    pub(crate) fn from_parts(arch: GenArch, image_dims: [usize; 3], kinds: Vec<TaskKind>, eps: f32, params: Vec<Tensor<f32>>) -> Result<Self> {
        let fresh = Self::new(arch, image_dims, kinds, eps, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::invalid(format!("expected {} generator tensors, got {}", fresh.params.len(), params.len())));
        }
        for (name, (a, b)) in fresh.names.iter().zip(fresh.params.iter().zip(&params)) {
            if a.shape() != b.shape() {
                return Err(Error::shape("generator parameters", format!("{name}: {:?} vs {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn arch(&self) -> &GenArch {
        &self.arch
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn task_kinds(&self) -> &[TaskKind] {
        &self.kinds
    }

    pub fn num_tasks(&self) -> usize {
        self.kinds.len()
    }

    pub fn eps(&self) -> f32 {
        self.eps
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

    /// Embedding bank `[C_k, E, H/2, W/2]` of every class-label task (`None` for dense tasks).
    pub fn banks(&self) -> Vec<Option<&Tensor<f32>>> {
        (0..self.kinds.len())
            .map(|k| {
                let name = format!("bank.{k}");
                self.names.iter().position(|n| *n == name).map(|i| &self.params[i])
            })
            .collect()
    }

    pub fn register<T: Float>(&self, g: &mut Graph<T>, trainable: bool) -> GenVars {
        let all: Vec<Var> = self.params.iter().map(|p| g.leaf(p.cast(), trainable)).collect();
        self.vars_from(all)
    }

    /// Wraps handles already on the tape, one per parameter in [`Self::param_names`] order.
    pub fn vars_from(&self, all: Vec<Var>) -> GenVars {
        assert_eq!(all.len(), self.params.len(), "one handle per generator parameter");
        let mut at = 0;
        let pairs = |at: &mut usize, n: usize| -> Vec<(Var, Var)> {
            let p = (0..n).map(|i| (all[*at + 2 * i], all[*at + 2 * i + 1])).collect();
            *at += 2 * n;
            p
        };
        let encoder = pairs(&mut at, self.arch.encoder.len());
        let decoder = pairs(&mut at, self.arch.decoder.len() + 1);
        let mut tasks = Vec::with_capacity(self.kinds.len());
        for kind in &self.kinds {
            tasks.push(match kind {
                TaskKind::Classification { .. } => {
                    at += 1;
                    TaskVars::Bank(all[at - 1])
                }
                _ => TaskVars::Embedder(pairs(&mut at, self.arch.encoder.len())),
            });
        }
        GenVars { all, encoder, decoder, tasks }
    }

    fn encode<T: Float>(&self, g: &mut Graph<T>, layers: &[(Var, Var)], x: Var) -> Result<Var> {
        let mut h = x;
        for (b, &(w, bias)) in self.arch.encoder.iter().zip(layers) {
            h = g.conv2d(h, w, Some(bias), b.stride, 1)?;
            h = g.relu(h);
        }
        Ok(h)
    }

    /// Single-channel map fed to a dense-label embedder: class / (C − 1) for
    /// segmentation, the raw field for regression.
    fn label_map<T: Float>(&self, kind: &TaskKind, target: &Targets, b: usize) -> Result<Tensor<T>> {
        let [_, h, w] = self.image_dims;
        let t = match (kind, target) {
            (TaskKind::Segmentation { classes }, Targets::Pixels(y)) => {
                let denom = (*classes - 1).max(1) as f32;
                Tensor::new([b, 1, h, w], y.iter().map(|&c| c as f32 / denom).collect())?
            }
            (TaskKind::Regression, Targets::Field(f)) => f.clone().reshape(vec![b, 1, h, w])?,
            _ => return Err(Error::invalid(format!("targets do not match task kind {kind:?}"))),
        };
        if t.numel() != b * h * w {
            return Err(Error::shape("dense_label_embed", "label map does not match the image size"));
        }
        Ok(t.cast())
    }

    /// Output `[B, E, H/2, W/2]` of dense embedder `k` for a label map `[B,1,H,W]`.
    pub fn dense_label_embed<T: Float>(&self, g: &mut Graph<T>, v: &GenVars, k: usize, map: Var) -> Result<Var> {
        let TaskVars::Embedder(layers) = &v.tasks[k] else {
            return Err(Error::invalid(format!("task {k} has an embedding bank, not a dense embedder")));
        };
        let s = g.shape(map);
        let [_, h, w] = self.image_dims;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(Error::shape("dense_label_embed", format!("label map {s:?}, expected [B,1,{h},{w}]")));
        }
        self.encode(g, layers, map)
    }

    /// Per-task conditioning tensors `[B, E, H/2, W/2]`.
    fn conditioning<T: Float>(&self, g: &mut Graph<T>, v: &GenVars, targets: &[Targets], mask: &ProtectionMask, b: usize) -> Result<Vec<Var>> {
        if targets.len() != self.kinds.len() || mask.len() != self.kinds.len() {
            return Err(Error::shape("generator_forward", format!("{} tasks, {} targets, mask of {}", self.kinds.len(), targets.len(), mask.len())));
        }
        let mut out = Vec::with_capacity(targets.len());
        for (k, (kind, t)) in self.kinds.iter().zip(targets).enumerate() {
            let e = match (&v.tasks[k], t) {
                (TaskVars::Bank(bank), Targets::Classes(y)) => {
                    let classes = kind.classes().unwrap_or(0);
                    if y.len() != b {
                        return Err(Error::shape("generator_forward", format!("task {k}: {} labels for {b} images", y.len())));
                    }
                    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
                        return Err(Error::LabelOutOfRange {
                            label: bad,
                            classes,
                            context: format!("generator task {k}"),
                        });
                    }
                    if mask.is_protected(k) {
                        g.index_select(*bank, y)?
                    } else {
                        let mean = bank_mean(g.value(*bank));
                        let m = g.constant(mean);
                        g.index_select(m, &vec![0; b])?
                    }
                }
                (TaskVars::Embedder(_), t) => {
                    if !mask.is_protected(k) {
                        return Err(Error::invalid(format!("dense task {k} cannot be left learnable")));
                    }
                    let map = self.label_map(kind, t, b)?;
                    let mv = g.constant(map);
                    self.dense_label_embed(g, v, k, mv)?
                }
                _ => return Err(Error::invalid(format!("targets do not match task kind {kind:?}"))),
            };
            out.push(e);
        }
        Ok(out)
    }

    /// δ = clamp(D([E(x), e¹, …, eᴷ]), −ε, ε) on the tape.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, v: &GenVars, x: Var, targets: &[Targets], mask: &ProtectionMask) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let [c, h, w] = self.image_dims;
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::shape("generator_forward", format!("input {s:?}, generator expects [B,{c},{h},{w}]")));
        }
        let z = self.encode(g, &v.encoder, x)?;
        let mut parts = vec![z];
        parts.extend(self.conditioning(g, v, targets, mask, s[0])?);
        let mut hdn = g.concat_channels(&parts)?;
        let last = v.decoder.len() - 1;
        for (i, &(wt, bias)) in v.decoder.iter().enumerate() {
            if i == self.arch.upsample_after {
                hdn = g.upsample_nearest2x(hdn)?;
            }
            hdn = g.conv_transpose2d(hdn, wt, Some(bias), 1, 1)?;
            if i < last {
                hdn = g.relu(hdn);
            }
        }
        if self.arch.upsample_after > last {
            hdn = g.upsample_nearest2x(hdn)?;
        }
        let eps = T::from_f64_lossy(self.eps as f64);
        g.clamp(hdn, T::zero() - eps, eps)
    }

    /// Perturbations for a batch, computed without tracking gradients.
    pub fn perturb(&self, x: &Tensor<f32>, targets: &[Targets], mask: &ProtectionMask) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let v = self.register(&mut g, false);
        let xv = g.constant(x.clone());
        let d = self.forward(&mut g, &v, xv, targets, mask)?;
        Ok(g.value(d).clone())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.params.len() == other.params.len() && self.params.iter().zip(&other.params).all(|(a, b)| a.bit_eq(b))
    }
}

/// Mean over the leading (class) axis, kept as a `[1, …]` tensor.
pub(crate) fn bank_mean<T: Float>(bank: &Tensor<T>) -> Tensor<T> {
    let rows = bank.shape()[0];
    let n = bank.row_len();
    let mut out = vec![T::zero(); n];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(bank.row(r)) {
            *o = *o + v;
        }
    }
    let inv = T::from_f64_lossy(1.0 / rows as f64);
    let mut shape = bank.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, out.into_iter().map(|v| v * inv).collect()).expect("shape preserved")
}

/// `generator_forward` on a batch: one δ per image, within the generator's ε-box.
pub fn generator_forward(gen: &PerturbGenerator, x: &Tensor<f32>, targets: &[Targets], mask: &ProtectionMask) -> Result<Tensor<f32>> {
    gen.perturb(x, targets, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_arch() -> GenArch {
        GenArch {
            encoder: vec![Block { width: 3, stride: 2 }, Block { width: 4, stride: 1 }],
            embed_channels: 2,
            decoder: vec![3],
            upsample_after: 1,
        }
    }

    fn cls(c: &[usize]) -> Vec<TaskKind> {
        c.iter().map(|&classes| TaskKind::Classification { classes }).collect()
    }

    #[test]
    fn standard_decoder_input_width() {
        let a = GenArch::standard();
        assert_eq!(a.encoder.len(), 9);
        assert_eq!(a.z_channels(), 128);
        assert_eq!(a.decoder_in(3), 176);
        let g = PerturbGenerator::new(a, [3, 8, 8], cls(&[2, 2, 2]), 8.0 / 255.0, 0).unwrap();
        let i = g.param_names().iter().position(|n| n == "decoder.0.weight").unwrap();
        assert_eq!(g.params()[i].shape(), &[176, 128, 3, 3]);
        let bank = g.banks()[1].unwrap();
        assert_eq!(bank.shape(), &[2, 16, 4, 4]);
        assert!(bank.max_abs() <= EMBED_INIT);
    }

    #[test]
    fn forward_shape_clip_and_determinism() {
        let eps = 8.0 / 255.0;
        let g = PerturbGenerator::new(tiny_arch(), [2, 6, 4], cls(&[2, 3]), eps, 1).unwrap();
        let x = Tensor::from_fn([3, 2, 6, 4], |i| (i % 11) as f32 / 10.0);
        let t = vec![Targets::Classes(vec![0, 1, 1]), Targets::Classes(vec![2, 0, 1])];
        let m = ProtectionMask::all(2);
        let a = generator_forward(&g, &x, &t, &m).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert!(a.max_abs() <= eps);
        assert!(a.bit_eq(&generator_forward(&g, &x, &t, &m).unwrap()));
    }

    #[test]
    fn rejects_out_of_range_labels_and_bad_shapes() {
        let g = PerturbGenerator::new(tiny_arch(), [1, 4, 4], cls(&[2]), 0.1, 0).unwrap();
        let x = Tensor::zeros([1, 1, 4, 4]);
        let m = ProtectionMask::all(1);
        assert!(matches!(g.perturb(&x, &[Targets::Classes(vec![2])], &m), Err(Error::LabelOutOfRange { .. })));
        assert!(g.perturb(&Tensor::zeros([1, 1, 6, 4]), &[Targets::Classes(vec![0])], &m).is_err());
        assert!(PerturbGenerator::new(tiny_arch(), [1, 5, 4], cls(&[2]), 0.1, 0).is_err());
    }

    #[test]
    fn learnable_task_ignores_its_label() {
        let g = PerturbGenerator::new(tiny_arch(), [1, 4, 4], cls(&[3, 2]), 0.5, 2).unwrap();
        // two copies of the same image
        let x = Tensor::from_fn([2, 1, 4, 4], |i| (i % 16) as f32 / 16.0);
        let m = ProtectionMask::only(2, &[1]).unwrap();
        let d = g.perturb(&x, &[Targets::Classes(vec![0, 2]), Targets::Classes(vec![1, 1])], &m).unwrap();
        assert_eq!(d.row(0), d.row(1));
        let all = ProtectionMask::all(2);
        let d = g.perturb(&x, &[Targets::Classes(vec![0, 2]), Targets::Classes(vec![1, 1])], &all).unwrap();
        assert_ne!(d.row(0), d.row(1));
        assert!(ProtectionMask::only(2, &[2]).is_err());
    }

    #[test]
    fn dense_embedder_shape_and_zero_map() {
        let kinds = vec![TaskKind::Segmentation { classes: 3 }, TaskKind::Regression];
        let gen = PerturbGenerator::new(tiny_arch(), [1, 4, 4], kinds, 0.1, 3).unwrap();
        let run = || {
            let mut g = Graph::<f32>::new();
            let v = gen.register(&mut g, false);
            let map = g.constant(Tensor::zeros([2, 1, 4, 4]));
            let e = gen.dense_label_embed(&mut g, &v, 1, map).unwrap();
            g.value(e).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 2, 2, 2]);
        assert!(a.bit_eq(&run()));
        let mut g = Graph::<f32>::new();
        let v = gen.register(&mut g, false);
        let bad = g.constant(Tensor::zeros([1, 1, 2, 4]));
        assert!(gen.dense_label_embed(&mut g, &v, 0, bad).is_err());
        let x = Tensor::full([2, 1, 4, 4], 0.5);
        let t = vec![Targets::Pixels(vec![1; 32]), Targets::Field(Tensor::full([2, 1, 4, 4], 0.3))];
        assert!(gen.perturb(&x, &t, &ProtectionMask::all(2)).unwrap().max_abs() <= 0.1);
        assert!(gen.perturb(&x, &t, &ProtectionMask::only(2, &[0]).unwrap()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_always_within_eps(seed in any::<u64>(), eps in 1e-4f32..0.5, scale in 0.1f32..50.0) {
            let mut g = PerturbGenerator::new(tiny_arch(), [1, 4, 4], cls(&[2, 2]), eps, seed).unwrap();
            // blow the weights up so that the clip is active
            for p in g.params_mut() {
                p.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let x = Tensor::from_fn([2, 1, 4, 4], |i| ((i as u64 ^ seed) % 7) as f32 / 6.0);
            let d = g.perturb(&x, &[Targets::Classes(vec![0, 1]), Targets::Classes(vec![1, 0])], &ProtectionMask::all(2)).unwrap();
            prop_assert!(d.data().iter().all(|v| v.abs() <= eps));
        }
    }
}
