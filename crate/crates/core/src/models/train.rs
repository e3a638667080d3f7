//! Mini-batch training with Adam and a multi-step learning-rate schedule.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::eval::argmax_classes;
use super::weighting::{Strategy, WeightingState};
use super::MtlModel;
use crate::autodiff::{Graph, Var};
use crate::data::{TaskData, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, MultiStepLr};
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Decay the learning rate ×0.1 at 60% and 80% of training.
    pub schedule: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 64,
            schedule: true,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation(format!("{field}.epochs"), "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::validation(format!("{field}.lr"), "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::validation(format!("{field}.batch"), "must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.schedule {
            MultiStepLr::proportional(self.lr, self.epochs).lr_at(epoch)
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub task_loss: Vec<f64>,
    /// Training accuracy (per sample or per pixel); `None` for regression tasks.
    pub task_accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Per-task losses of `heads` against `targets`: mean cross-entropy for
/// classification and segmentation, mean absolute error for regression.
pub fn task_losses<T: Float>(g: &mut Graph<T>, heads: &[Var], kinds: &[TaskKind], targets: &[Targets]) -> Result<Vec<Var>> {
    if heads.len() != kinds.len() || targets.len() != kinds.len() {
        return Err(Error::shape("task_losses", format!("{} heads, {} kinds, {} targets", heads.len(), kinds.len(), targets.len())));
    }
    heads
        .iter()
        .zip(kinds.iter().zip(targets))
        .map(|(&h, (kind, t))| match (kind, t) {
            (TaskKind::Classification { .. }, Targets::Classes(y)) | (TaskKind::Segmentation { .. }, Targets::Pixels(y)) => {
                g.softmax_cross_entropy(h, y)
            }
            (TaskKind::Regression, Targets::Field(f)) => {
                let target = g.constant(f.cast());
                g.l1_loss(h, target)
            }
            _ => Err(Error::invalid(format!("targets do not match task kind {kind:?}"))),
        })
        .collect()
}

/// Correct predictions and positions counted for one task.
pub(crate) fn count_correct(out: &Tensor<f32>, target: &Targets) -> Option<(usize, usize)> {
    let y = match target {
        Targets::Classes(y) | Targets::Pixels(y) => y,
        Targets::Field(_) => return None,
    };
    let pred = argmax_classes(out);
    Some((pred.iter().zip(y).filter(|(a, b)| a == b).count(), y.len()))
}

pub(crate) struct StepStats {
    pub losses: Vec<f64>,
    pub total: f64,
    pub correct: Vec<Option<(usize, usize)>>,
}

/// Optimizer and weighting state for repeated steps on one model.
pub struct Trainer {
    opt: Adam<f32>,
    weighting: WeightingState,
}

impl Trainer {
    pub fn new(strategy: Strategy, tasks: usize, seed: u64) -> Self {
        Self {
            opt: Adam::new(AdamConfig::default()),
            weighting: WeightingState::new(strategy, tasks, seed),
        }
    }

    pub fn weighting(&self) -> &WeightingState {
        &self.weighting
    }

    /// One Adam step on the samples `idx` of `data`.
    pub(crate) fn step<D: TaskData>(&mut self, model: &mut MtlModel, data: &D, idx: &[usize], lr: f64) -> Result<StepStats> {
        let targets: Vec<Targets> = (0..model.num_tasks()).map(|k| data.targets(k, idx)).collect();
        self.step_batch(model, data.images().select_rows(idx)?, &targets, lr)
    }

    /// One Adam step on an explicit batch.
    pub(crate) fn step_batch(&mut self, model: &mut MtlModel, images: Tensor<f32>, targets: &[Targets], lr: f64) -> Result<StepStats> {
        let kinds = model.task_kinds().to_vec();
        let mut g = Graph::<f32>::new();
        let p = model.register(&mut g, true);
        let x = g.constant(images);
        let out = model.forward(&mut g, &p, x)?;
        let losses = task_losses(&mut g, &out.heads, &kinds, targets)?;
        let values: Vec<f64> = losses.iter().map(|&l| g.value(l).item() as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training loss"));
        }
        let w = self.weighting.weights();
        let terms: Vec<Var> = losses.iter().zip(&w).map(|(&l, &w)| g.scale(l, w as f32)).collect();
        let total = g.add_all(&terms)?;
        let total_value = g.value(total).item() as f64 + self.weighting.offset();
        let correct = out.heads.iter().zip(targets).map(|(&h, t)| count_correct(g.value(h), t)).collect();
        let mut grads = g.backward(total)?;
        let gs: Vec<Tensor<f32>> = p
            .iter()
            .zip(model.params())
            .map(|(&v, t)| grads.take_or_zeros(v, t.shape()))
            .collect();
        self.opt.set_lr(lr);
        self.opt.step(&mut model.params_mut().iter_mut().collect::<Vec<_>>(), &gs)?;
        self.weighting.update(&values, lr)?;
        Ok(StepStats {
            losses: values,
            total: total_value,
            correct,
        })
    }
}

pub(crate) fn check_compatible<D: TaskData>(model: &MtlModel, data: &D) -> Result<()> {
    if model.task_kinds() != data.task_kinds().as_slice() {
        return Err(Error::invalid(format!(
            "model tasks {:?} do not match dataset tasks {:?}",
            model.task_kinds(),
            data.task_kinds()
        )));
    }
    if data.image_dims()[0] != model.in_channels() {
        return Err(Error::shape("train_model", format!("dataset has {} channels, model expects {}", data.image_dims()[0], model.in_channels())));
    }
    Ok(())
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut r = rng::stream(seed, epoch as u64);
    rng::permutation(n, &mut r).chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Endless stream of shuffled mini-batches, reshuffled every pass over the data.
pub(crate) struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    pass: usize,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch: batch.max(1),
            seed,
            pass: 0,
            queue: Default::default(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue.extend(epoch_batches(self.n, self.batch, self.seed, self.pass));
            self.pass += 1;
        }
        self.queue.pop_front().expect("a pass yields at least one batch")
    }
}

/// Trains `model` in place. Shuffling, RLW draws and UW updates are all seeded.
pub fn train_model<D: TaskData>(model: &mut MtlModel, data: &D, hyper: &TrainHyper, strategy: Strategy, seed: u64) -> Result<TrainHistory> {
    train_model_with(model, data, hyper, strategy, seed, |_, _| {})
}

/// [`train_model`] with a hook called after every epoch.
pub fn train_model_with<D: TaskData>(
    model: &mut MtlModel,
    data: &D,
    hyper: &TrainHyper,
    strategy: Strategy,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &MtlModel),
) -> Result<TrainHistory> {
    hyper.validate("train")?;
    check_compatible(model, data)?;
    let k = model.num_tasks();
    let mut trainer = Trainer::new(strategy, k, seed);
    let shuffle_seed = rng::derive_seed(seed, "shuffle");
    let mut history = TrainHistory::default();
    for epoch in 0..hyper.epochs {
        let lr = hyper.lr_at(epoch);
        let mut loss_sum = vec![0.0; k];
        let mut total_sum = 0.0;
        let mut hits: Vec<Option<(usize, usize)>> = vec![None; k];
        let batches = epoch_batches(data.len(), hyper.batch, shuffle_seed, epoch);
        for idx in &batches {
            let s = trainer.step(model, data, idx, lr)?;
            let frac = idx.len() as f64 / data.len() as f64;
            total_sum += s.total * frac;
            for t in 0..k {
                loss_sum[t] += s.losses[t] * frac;
                if let Some((c, n)) = s.correct[t] {
                    let e = hits[t].get_or_insert((0, 0));
                    e.0 += c;
                    e.1 += n;
                }
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            total_loss: total_sum,
            task_loss: loss_sum,
            task_accuracy: hits.iter().map(|h| h.map(|(c, n)| c as f64 / n as f64)).collect(),
        });
        on_epoch(epoch, model);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{MultiTaskDataset, Split};
    use crate::models::{build_mtl_model, Arch, Block};

    fn toy() -> MultiTaskDataset {
        // task 0: bright left half vs bright right half; task 1: overall brightness
        let n = 64;
        let mut labels = Vec::new();
        let images = Tensor::from_fn([n, 1, 4, 4], |i| {
            let s = i / 16;
            let x = i % 4;
            let left = s % 2 == 0;
            let bright = (s / 2) % 2 == 0;
            let base = if bright { 0.6 } else { 0.2 };
            base + if (x < 2) == left { 0.3 } else { 0.0 }
        });
        for s in 0..n {
            labels.push(s % 2);
            labels.push((s / 2) % 2);
        }
        MultiTaskDataset::new(images, labels, vec![2, 2], Split::Train).unwrap()
    }

    fn small_arch() -> Arch {
        Arch {
            encoder: vec![Block { width: 8, stride: 1 }],
            decoder: vec![],
        }
    }

    #[test]
    fn loss_decreases_on_separable_toy() {
        let data = toy();
        for strategy in [Strategy::Ls, Strategy::Uw, Strategy::Rlw] {
            let mut m = build_mtl_model(small_arch(), 1, &data.task_kinds(), 0).unwrap();
            let hyper = TrainHyper {
                epochs: 10,
                lr: 1e-2,
                batch: 16,
                schedule: false,
            };
            let h = train_model(&mut m, &data, &hyper, strategy, 1).unwrap();
            let first: f64 = h.epochs[0].task_loss.iter().sum();
            let last: f64 = h.last().unwrap().task_loss.iter().sum();
            assert!(last < first, "{strategy:?}: {first} -> {last}");
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = toy();
        let hyper = TrainHyper {
            epochs: 3,
            batch: 16,
            ..TrainHyper::default()
        };
        let run = || {
            let mut m = build_mtl_model(small_arch(), 1, &data.task_kinds(), 4).unwrap();
            train_model(&mut m, &data, &hyper, Strategy::Rlw, 4).unwrap();
            m
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn rejects_mismatched_tasks() {
        let data = toy();
        let mut m = build_mtl_model(small_arch(), 1, &[TaskKind::Classification { classes: 2 }], 0).unwrap();
        assert!(train_model(&mut m, &data, &TrainHyper::default(), Strategy::Ls, 0).is_err());
    }
}
