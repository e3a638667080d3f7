//! Targeted adversarial poisoning against a clean-trained surrogate, and its
//! self-ensemble variant that averages the objective over training checkpoints.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::pgd::{pgd_dataset, PgdConfig, PgdMode};
use super::{Bound, PerturbationSet, DEFAULT_EPS};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::models::{model_hash, train_model_with, MtlModel, Strategy, TrainHyper};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TapConfig {
    /// Taken from the attack's budget, not from this section.
    #[serde(skip)]
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
    /// Number of surrogate checkpoints for the self-ensemble variant.
    pub checkpoints: usize,
    pub batch: usize,
}

impl Default for TapConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            steps: 250,
            step_size: 0.064 / 255.0,
            checkpoints: 15,
            batch: 256,
        }
    }
}

impl TapConfig {
    pub fn validate(&self) -> Result<()> {
        Bound::Linf { eps: self.eps }.validate()?;
        if !(self.step_size > 0.0) {
            return Err(Error::validation("tap.step_size", "must be positive"));
        }
        if self.checkpoints == 0 {
            return Err(Error::validation("tap.checkpoints", "must be at least 1"));
        }
        Ok(())
    }

    pub(crate) fn pgd(&self) -> PgdConfig {
        PgdConfig {
            eps: self.eps,
            steps: self.steps,
            step_size: self.step_size,
        }
    }
}

/// Epochs (0-based) after which a snapshot is kept: `count` evenly spaced, ending
/// with the last epoch. Fewer are returned when there are fewer epochs than `count`.
pub fn checkpoint_epochs(epochs: usize, count: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=count).map(|i| ((i * epochs) as f64 / count as f64).round() as usize).filter(|&e| e > 0).map(|e| e - 1).collect();
    out.dedup();
    out
}

/// Trains `model` on clean data and returns evenly spaced snapshots; the last one is
/// the fully trained model.
pub fn train_checkpoints<D: TaskData>(
    mut model: MtlModel,
    data: &D,
    hyper: &TrainHyper,
    strategy: Strategy,
    count: usize,
    seed: u64,
) -> Result<Vec<MtlModel>> {
    if count == 0 {
        return Err(Error::validation("tap.checkpoints", "must be at least 1"));
    }
    let keep = checkpoint_epochs(hyper.epochs, count);
    let mut snaps = Vec::with_capacity(keep.len());
    train_model_with(&mut model, data, hyper, strategy, seed, |e, m| {
        if keep.contains(&e) {
            snaps.push(m.clone());
        }
    })?;
    Ok(snaps)
}

/// Targeted PGD against the mean objective of `checkpoints` (one checkpoint gives plain
/// TAP). Label-valued tasks are pushed toward `(y + C/2) mod C`; regression tasks are
/// pushed away from their targets.
pub fn craft_tap_sep<D: TaskData>(data: &D, checkpoints: &[MtlModel], cfg: &TapConfig, seed: u64) -> Result<PerturbationSet> {
    cfg.validate()?;
    if checkpoints.is_empty() {
        return Err(Error::MissingSurrogate("targeted poisoning needs at least one surrogate checkpoint".into()));
    }
    let refs: Vec<&MtlModel> = checkpoints.iter().collect();
    let delta = pgd_dataset(&refs, data, None, PgdMode::Targeted, &cfg.pgd(), cfg.batch)?;
    let method = if checkpoints.len() == 1 { "tap" } else { "sep" };
    let mut set = PerturbationSet::new(delta, Bound::Linf { eps: cfg.eps }, method, seed)?;
    set.surrogate_hash = checkpoints.last().map(model_hash);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_classification_mtl, SynthSpec};
    use crate::models::{build_mtl_model, Arch, Block};

    #[test]
    fn checkpoint_schedule() {
        assert_eq!(checkpoint_epochs(30, 15), (0..15).map(|i| 2 * i + 1).collect::<Vec<_>>());
        assert_eq!(checkpoint_epochs(10, 1), vec![9]);
        assert_eq!(checkpoint_epochs(3, 5), vec![0, 1, 2]);
    }

    #[test]
    fn crafts_within_budget() {
        let spec = SynthSpec {
            class_counts: vec![2, 3],
            n_train: 32,
            n_test: 8,
            channels: 1,
            height: 8,
            width: 8,
            ..SynthSpec::default()
        };
        let (train, _) = generate_classification_mtl(&spec, 0).unwrap();
        let arch = Arch {
            encoder: vec![Block { width: 4, stride: 2 }],
            decoder: vec![],
        };
        let m = build_mtl_model(arch, 1, &train.task_kinds(), 0).unwrap();
        let hyper = TrainHyper {
            epochs: 4,
            batch: 16,
            ..TrainHyper::default()
        };
        let snaps = train_checkpoints(m, &train, &hyper, Strategy::Ls, 2, 0).unwrap();
        assert_eq!(snaps.len(), 2);
        let cfg = TapConfig {
            steps: 3,
            step_size: 2.0 / 255.0,
            ..TapConfig::default()
        };
        let tap = craft_tap_sep(&train, &snaps[1..], &cfg, 0).unwrap();
        let sep = craft_tap_sep(&train, &snaps, &cfg, 0).unwrap();
        assert_eq!((tap.method.as_str(), sep.method.as_str()), ("tap", "sep"));
        assert!(tap.deltas.max_abs() <= cfg.eps && tap.deltas.max_abs() > 0.0);
        assert!(matches!(craft_tap_sep(&train, &[], &cfg, 0), Err(Error::MissingSurrogate(_))));
    }
}
