//! Generator optimization: base unlearnable loss against surrogate(s) plus the two
//! embedding regularizers, optionally co-training the surrogate on poisoned batches.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::net::{GenArch, GenVars, PerturbGenerator, ProtectionMask};
use super::reg::{inter_er, inter_er_graph, intra_er, intra_er_graph};
use crate::attacks::em::EmSurrogate;
use crate::attacks::pgd::{mode_targets, Direction, PgdMode};
use crate::attacks::{poison_images, Bound, PerturbationSet, SurrogateConfig, DEFAULT_EPS};
use crate::autodiff::{Graph, Var};
use crate::data::{TaskData, Targets};
use crate::error::{Error, Result};
use crate::models::train::epoch_batches;
use crate::models::{model_hash, task_losses, MtlModel};
use crate::optim::{Adam, AdamConfig, MultiStepLr};
use crate::rng;
use crate::tensor::{Float, Tensor};

/// Unlearnable-example method whose loss drives the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum BaseUe {
    /// Minimize every task loss of a co-trained surrogate.
    #[default]
    Em,
    /// Targeted attack on one frozen surrogate.
    Tap,
    /// Targeted attack on the mean loss of several frozen checkpoints.
    Sep,
}

impl BaseUe {
    pub(crate) fn mode(self) -> PgdMode {
        match self {
            BaseUe::Em => PgdMode::Minimize,
            BaseUe::Tap | BaseUe::Sep => PgdMode::Targeted,
        }
    }

    pub fn method_name(self) -> &'static str {
        match self {
            BaseUe::Em => "mtlue-em",
            BaseUe::Tap => "mtlue-tap",
            BaseUe::Sep => "mtlue-sep",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GenTrainConfig {
    /// Base method, regularizer weights, budget and co-training are set by the attack
    /// method and its top-level fields rather than by this section.
    #[serde(skip)]
    pub base: BaseUe,
    #[serde(skip)]
    pub lambda1: f64,
    #[serde(skip)]
    pub lambda2: f64,
    pub epochs: usize,
    /// Surrogate optimizer steps after every generator epoch (co-training only).
    pub surrogate_iters: usize,
    #[serde(skip)]
    pub train_surrogate: bool,
    #[serde(skip)]
    pub eps: f32,
    pub lr: f64,
    pub batch: usize,
    pub schedule: bool,
    pub arch: GenArch,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        Self {
            base: BaseUe::Em,
            lambda1: 20.0,
            lambda2: 100.0,
            epochs: 30,
            surrogate_iters: 10,
            train_surrogate: true,
            eps: DEFAULT_EPS,
            lr: 1e-3,
            batch: 64,
            schedule: true,
            arch: GenArch::standard(),
        }
    }
}

impl GenTrainConfig {
    /// Defaults for a frozen-surrogate base (`Tap` or `Sep`).
    pub fn frozen(base: BaseUe) -> Self {
        Self {
            base,
            train_surrogate: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(format!("generator.{f}"), m));
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return bad("lambda1", "must be a finite non-negative number");
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad("lambda2", "must be a finite non-negative number");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.surrogate_iters == 0 {
            return bad("surrogate_iters", "must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if self.train_surrogate && self.base != BaseUe::Em {
            return bad("train_surrogate", "targeted bases attack frozen pretrained surrogates");
        }
        Bound::Linf { eps: self.eps }.validate()?;
        self.arch.validate()
    }
}

/// Terms of the composite loss on one batch.
pub struct LossParts {
    pub total: Var,
    pub base: Var,
    pub intra: Option<Var>,
    pub inter: Option<Var>,
}

/// `L_b(surrogates, clamp(x+δ,0,1), y) + λ1·intra + λ2·inter` on the tape.
///
/// `loss_targets`/`dirs` come from [`mode_targets`]; `targets` are the true labels that
/// select embeddings. The base loss is averaged over tasks and surrogates.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<T: Float>(
    g: &mut Graph<T>,
    gen: &PerturbGenerator,
    v: &GenVars,
    x: Var,
    targets: &[Targets],
    surrogates: &[&MtlModel],
    loss_targets: &[Targets],
    dirs: &[Direction],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts> {
    if surrogates.is_empty() {
        return Err(Error::MissingSurrogate("the base loss needs a surrogate".into()));
    }
    let delta = gen.forward(g, v, x, targets, &ProtectionMask::all(gen.num_tasks()))?;
    let xp = g.add(x, delta)?;
    let xp = g.clamp(xp, T::zero(), T::one())?;
    let k = T::from_f64_lossy(1.0 / gen.num_tasks() as f64);
    let mut per_model = Vec::with_capacity(surrogates.len());
    for m in surrogates {
        let p = m.register(g, false);
        let out = m.forward(g, &p, xp)?;
        let losses = task_losses(g, &out.heads, m.task_kinds(), loss_targets)?;
        let terms: Vec<Var> = losses
            .iter()
            .zip(dirs)
            .map(|(&l, d)| g.scale(l, if *d == Direction::Descend { k } else { T::zero() - k }))
            .collect();
        per_model.push(g.add_all(&terms)?);
    }
    let sum = g.add_all(&per_model)?;
    let base = g.scale(sum, T::from_f64_lossy(1.0 / surrogates.len() as f64));
    let banks = v.banks();
    let has_pairs = banks.iter().any(|&b| g.shape(b)[0] >= 2);
    let intra = if has_pairs { Some(intra_er_graph(g, &banks)?) } else { None };
    let inter = if banks.len() >= 2 { Some(inter_er_graph(g, &banks)?) } else { None };
    let mut total = vec![base];
    if let Some(i) = intra {
        total.push(g.scale(i, T::from_f64_lossy(lambda1)));
    }
    if let Some(i) = inter {
        total.push(g.scale(i, T::from_f64_lossy(lambda2)));
    }
    let total = g.add_all(&total)?;
    Ok(LossParts { total, base, intra, inter })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenEpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub base_loss: f64,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GenTrainOutcome {
    pub generator: PerturbGenerator,
    /// The co-trained surrogate, when there was one.
    pub surrogate: Option<MtlModel>,
    pub initial_intra: Option<f64>,
    pub initial_inter: Option<f64>,
    pub history: Vec<GenEpochRecord>,
}

/// Intra/inter regularizer values of a generator's banks, where defined.
pub fn embedding_stats(gen: &PerturbGenerator) -> (Option<f64>, Option<f64>) {
    let banks: Vec<&Tensor<f32>> = gen.banks().into_iter().flatten().collect();
    (intra_er(&banks).ok(), inter_er(&banks).ok())
}

/// Trains a generator on `data`.
///
/// `pretrained` supplies the frozen surrogate(s) for targeted bases, or an optional
/// starting point for the co-trained surrogate. Without co-training at least one
/// pretrained model is required; this is checked before any training step.
pub fn train_generator<D: TaskData>(
    data: &D,
    surrogate: &SurrogateConfig,
    pretrained: &[MtlModel],
    cfg: &GenTrainConfig,
    seed: u64,
) -> Result<GenTrainOutcome> {
    cfg.validate()?;
    if !cfg.train_surrogate && pretrained.is_empty() {
        return Err(Error::MissingSurrogate(format!("{:?} base without surrogate training needs a pretrained checkpoint", cfg.base)));
    }
    if cfg.train_surrogate && pretrained.len() > 1 {
        return Err(Error::validation("generator.train_surrogate", "co-training continues at most one pretrained surrogate"));
    }
    if cfg.base == BaseUe::Tap && pretrained.len() > 1 {
        return Err(Error::validation("generator.base", "tap attacks a single surrogate; use sep for several"));
    }
    let mut gen = PerturbGenerator::new(cfg.arch.clone(), data.image_dims(), data.task_kinds(), cfg.eps, rng::derive_seed(seed, "generator"))?;
    let mut co = if cfg.train_surrogate {
        Some(match pretrained.first() {
            Some(m) => EmSurrogate::with_model(m.clone(), data, surrogate, seed)?,
            None => EmSurrogate::new(data, surrogate, seed)?,
        })
    } else {
        for m in pretrained {
            crate::models::train::check_compatible(m, data)?;
        }
        None
    };
    let (initial_intra, initial_inter) = embedding_stats(&gen);
    let mut opt = Adam::<f32>::new(AdamConfig::default());
    let schedule = MultiStepLr::proportional(cfg.lr, cfg.epochs);
    let shuffle = rng::derive_seed(seed, "generator/shuffle");
    let kinds = data.task_kinds();
    let mask = ProtectionMask::all(kinds.len());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = if cfg.schedule { schedule.lr_at(epoch) } else { cfg.lr };
        opt.set_lr(lr);
        let (mut base_sum, mut count) = (0.0, 0usize);
        let (mut last_intra, mut last_inter) = (None, None);
        for idx in epoch_batches(data.len(), cfg.batch, shuffle, epoch) {
            let targets: Vec<Targets> = (0..kinds.len()).map(|k| data.targets(k, &idx)).collect();
            let (loss_targets, dirs) = mode_targets(&kinds, targets.clone(), cfg.base.mode());
            let models: Vec<&MtlModel> = match &co {
                Some(s) => vec![&s.model],
                None => pretrained.iter().collect(),
            };
            let mut g = Graph::<f32>::new();
            let v = gen.register(&mut g, true);
            let x = g.constant(data.images().select_rows(&idx)?);
            let parts = composite_loss(&mut g, &gen, &v, x, &targets, &models, &loss_targets, &dirs, cfg.lambda1, cfg.lambda2)?;
            let total = g.value(parts.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite("generator loss"));
            }
            base_sum += g.value(parts.base).item() as f64 * idx.len() as f64;
            count += idx.len();
            last_intra = parts.intra.map(|i| g.value(i).item() as f64);
            last_inter = parts.inter.map(|i| g.value(i).item() as f64);
            let mut grads = g.backward(parts.total)?;
            let gs: Vec<Tensor<f32>> = v.all.iter().zip(gen.params()).map(|(&p, t)| grads.take_or_zeros(p, t.shape())).collect();
            opt.step(&mut gen.params_mut().iter_mut().collect::<Vec<_>>(), &gs)?;
        }
        if let Some(s) = co.as_mut() {
            for _ in 0..cfg.surrogate_iters {
                let idx = s.next_batch();
                let x = data.images().select_rows(&idx)?;
                let targets: Vec<Targets> = (0..kinds.len()).map(|k| data.targets(k, &idx)).collect();
                let d = gen.perturb(&x, &targets, &mask)?;
                s.step_batch(poison_images(&x, &d, Bound::Linf { eps: cfg.eps })?, &targets)?;
            }
        }
        history.push(GenEpochRecord {
            epoch,
            lr,
            base_loss: base_sum / count.max(1) as f64,
            intra: last_intra,
            inter: last_inter,
        });
    }
    Ok(GenTrainOutcome {
        generator: gen,
        surrogate: co.map(|s| s.model),
        initial_intra,
        initial_inter,
        history,
    })
}

/// Perturbations for every sample of `data` from a trained generator.
pub fn craft_with_generator<D: TaskData>(gen: &PerturbGenerator, data: &D, mask: &ProtectionMask, method: &str, seed: u64, batch: usize) -> Result<PerturbationSet> {
    if gen.task_kinds() != data.task_kinds().as_slice() || gen.image_dims() != data.image_dims() {
        return Err(Error::shape("poison", "generator and dataset disagree on tasks or image shape"));
    }
    let n = data.len();
    let mut out = Vec::with_capacity(data.images().numel());
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let targets: Vec<Targets> = (0..gen.num_tasks()).map(|k| data.targets(k, &idx)).collect();
        out.extend_from_slice(gen.perturb(&data.images().select_rows(&idx)?, &targets, mask)?.data());
    }
    PerturbationSet::new(Tensor::new(data.images().shape().to_vec(), out)?, Bound::Linf { eps: gen.eps() }, method, seed)
}

/// Poisoned copy of `data` produced by a trained generator.
pub fn poison_with_generator<D: TaskData>(gen: &PerturbGenerator, data: &D, mask: &ProtectionMask) -> Result<D> {
    let set = craft_with_generator(gen, data, mask, "generator", 0, 128)?;
    crate::attacks::poison_dataset(data, &set)
}

/// Surrogate fingerprint recorded alongside generator-made perturbations.
pub fn surrogate_fingerprint(models: &[MtlModel]) -> Option<String> {
    models.last().map(model_hash)
}
