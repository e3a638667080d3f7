//! Error-minimizing noise: alternate surrogate training on the poisoned data with PGD
//! that drives every task loss down, until the surrogate fits the poisoned data.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::pgd::{pgd_dataset, PgdConfig, PgdMode};
use super::{poison_images, Bound, PerturbationSet, DEFAULT_EPS};
use crate::data::{TaskData, Targets};
use crate::error::{Error, Result};
use crate::models::train::{check_compatible, BatchStream, Trainer};
use crate::models::{build_mtl_model, evaluate_model, model_hash, Arch, MtlModel, Strategy};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub arch: Arch,
    pub strategy: Strategy,
    pub lr: f64,
    pub batch: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            arch: Arch::classification_default(),
            strategy: Strategy::Ls,
            lr: 1e-3,
            batch: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Taken from the attack's budget, not from this section.
    #[serde(skip)]
    pub eps: f32,
    pub pgd_steps: usize,
    pub pgd_step: f32,
    /// Surrogate optimizer steps between two perturbation updates.
    pub surrogate_iters: usize,
    /// Stop once the surrogate's mean training accuracy on poisoned data reaches this.
    pub stop_acc: f64,
    pub max_outer: usize,
    /// Batch size for the perturbation update.
    pub pgd_batch: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            pgd_steps: 20,
            pgd_step: 0.8 / 255.0,
            surrogate_iters: 10,
            stop_acc: 0.99,
            max_outer: 50,
            pgd_batch: 256,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        Bound::Linf { eps: self.eps }.validate()?;
        if self.pgd_steps == 0 || !(self.pgd_step > 0.0) {
            return Err(Error::validation("em.pgd_step", "need at least one step of positive size"));
        }
        if self.max_outer == 0 {
            return Err(Error::validation("em.max_outer", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.stop_acc) {
            return Err(Error::validation("em.stop_acc", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub(crate) fn pgd(&self) -> PgdConfig {
        PgdConfig {
            eps: self.eps,
            steps: self.pgd_steps,
            step_size: self.pgd_step,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub set: PerturbationSet,
    pub surrogate: MtlModel,
    pub outer_loops: usize,
    /// Surrogate accuracy on the final poisoned training set.
    pub final_accuracy: f64,
}

/// State of the bi-level loop shared with the generator's error-minimizing base.
pub(crate) struct EmSurrogate {
    pub model: MtlModel,
    trainer: Trainer,
    batches: BatchStream,
    lr: f64,
}

impl EmSurrogate {
    pub fn new<D: TaskData>(data: &D, cfg: &SurrogateConfig, seed: u64) -> Result<Self> {
        if !(cfg.lr > 0.0) || cfg.batch == 0 {
            return Err(Error::validation("surrogate.lr", "need a positive learning rate and batch size"));
        }
        let model = build_mtl_model(cfg.arch.clone(), data.image_dims()[0], &data.task_kinds(), rng::derive_seed(seed, "surrogate/init"))?;
        Self::with_model(model, data, cfg, seed)
    }

    /// Continues training an existing model.
    pub fn with_model<D: TaskData>(model: MtlModel, data: &D, cfg: &SurrogateConfig, seed: u64) -> Result<Self> {
        check_compatible(&model, data)?;
        Ok(Self {
            model,
            trainer: Trainer::new(cfg.strategy, data.num_tasks(), rng::derive_seed(seed, "surrogate/weighting")),
            batches: BatchStream::new(data.len(), cfg.batch, rng::derive_seed(seed, "surrogate/shuffle")),
            lr: cfg.lr,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        self.batches.next_batch()
    }

    pub fn step_batch(&mut self, images: Tensor<f32>, targets: &[Targets]) -> Result<()> {
        self.trainer.step_batch(&mut self.model, images, targets, self.lr).map(|_| ())
    }

    /// `iters` optimizer steps on `poisoned`.
    pub fn train<D: TaskData>(&mut self, poisoned: &D, iters: usize) -> Result<()> {
        for _ in 0..iters {
            let idx = self.batches.next_batch();
            self.trainer.step(&mut self.model, poisoned, &idx, self.lr)?;
        }
        Ok(())
    }

    /// Mean accuracy over label-valued tasks; 0 when there are none.
    pub fn accuracy<D: TaskData>(&self, data: &D) -> Result<f64> {
        let r = evaluate_model(&self.model, data)?;
        Ok(if r.avg_accuracy.is_nan() { 0.0 } else { r.avg_accuracy })
    }
}

/// Sample-wise error-minimizing noise for every task jointly.
pub fn craft_em<D: TaskData>(data: &D, surrogate: &SurrogateConfig, cfg: &EmConfig, seed: u64) -> Result<EmOutcome> {
    cfg.validate()?;
    let bound = Bound::Linf { eps: cfg.eps };
    let mut s = EmSurrogate::new(data, surrogate, seed)?;
    let mut delta = Tensor::zeros(data.images().shape().to_vec());
    let mut outer_loops = 0;
    let mut final_accuracy = 0.0;
    while outer_loops < cfg.max_outer {
        outer_loops += 1;
        let poisoned = data.with_images(poison_images(data.images(), &delta, bound)?)?;
        s.train(&poisoned, cfg.surrogate_iters)?;
        delta = pgd_dataset(&[&s.model], data, Some(&delta), PgdMode::Minimize, &cfg.pgd(), cfg.pgd_batch)?;
        let poisoned = data.with_images(poison_images(data.images(), &delta, bound)?)?;
        final_accuracy = s.accuracy(&poisoned)?;
        if final_accuracy >= cfg.stop_acc {
            break;
        }
    }
    let mut set = PerturbationSet::new(delta, bound, "em", seed)?;
    set.surrogate_hash = Some(model_hash(&s.model));
    Ok(EmOutcome {
        set,
        surrogate: s.model,
        outer_loops,
        final_accuracy,
    })
}
