//! Projected sign-gradient descent under an ℓ∞ budget.

use serde::{Deserialize, Serialize};

use super::target_label;
use crate::autodiff::{Graph, Var};
use crate::data::{TaskData, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::models::{task_losses, MtlModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PgdMode {
    /// Descend toward `target_label` on label-valued tasks; ascend on regression tasks.
    Targeted,
    /// Ascend on the true labels.
    Untargeted,
    /// Descend on the true labels (the inner step of error-minimizing noise).
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps: f32,
    pub steps: usize,
    pub step_size: f32,
}

/// Result of one PGD run.
#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub delta: Tensor<f32>,
    /// Signed objective (lower is better for the attacker) at each iterate before its step.
    pub objective: Vec<f64>,
}

/// Targets and directions implementing `mode` for the given true targets.
pub fn mode_targets(kinds: &[TaskKind], targets: Vec<Targets>, mode: PgdMode) -> (Vec<Targets>, Vec<Direction>) {
    let mut dirs = Vec::with_capacity(kinds.len());
    let out = kinds
        .iter()
        .zip(targets)
        .map(|(kind, t)| match (mode, kind.classes(), t) {
            (PgdMode::Minimize, _, t) => {
                dirs.push(Direction::Descend);
                t
            }
            (PgdMode::Untargeted, _, t) | (PgdMode::Targeted, None, t) => {
                dirs.push(Direction::Ascend);
                t
            }
            (PgdMode::Targeted, Some(c), Targets::Classes(y)) => {
                dirs.push(Direction::Descend);
                Targets::Classes(y.into_iter().map(|v| target_label(v, c)).collect())
            }
            (PgdMode::Targeted, Some(c), Targets::Pixels(y)) => {
                dirs.push(Direction::Descend);
                Targets::Pixels(y.into_iter().map(|v| target_label(v, c)).collect())
            }
            (PgdMode::Targeted, Some(_), t) => {
                dirs.push(Direction::Ascend);
                t
            }
        })
        .collect();
    (out, dirs)
}

/// Keeps `x + δ` inside [0,1] and `δ` inside the ε-box; the ε clamp is applied last so
/// the box constraint holds exactly.
fn project(x: &[f32], d: &mut [f32], eps: f32) {
    for (v, &xi) in d.iter_mut().zip(x) {
        *v = ((xi + *v).clamp(0.0, 1.0) - xi).clamp(-eps, eps);
    }
}

/// PGD against the mean objective of several models (one model = plain PGD).
pub fn pgd_ensemble(
    models: &[&MtlModel],
    x: &Tensor<f32>,
    init: Option<&Tensor<f32>>,
    targets: &[Targets],
    dirs: &[Direction],
    cfg: &PgdConfig,
) -> Result<PgdOutcome> {
    if models.is_empty() {
        return Err(Error::invalid("PGD needs at least one model"));
    }
    if !(cfg.eps > 0.0) || !(cfg.step_size >= 0.0) {
        return Err(Error::invalid("PGD needs eps > 0 and a non-negative step size"));
    }
    let kinds = models[0].task_kinds().to_vec();
    if models.iter().any(|m| m.task_kinds() != kinds.as_slice()) || dirs.len() != kinds.len() {
        return Err(Error::invalid("PGD models and directions must agree on tasks"));
    }
    let mut delta = match init {
        Some(d) if d.shape() == x.shape() => d.clone(),
        Some(d) => return Err(Error::shape("pgd", format!("init {:?} vs x {:?}", d.shape(), x.shape()))),
        None => Tensor::zeros(x.shape().to_vec()),
    };
    project(x.data(), delta.data_mut(), cfg.eps);
    let k = kinds.len() as f32;
    let mut objective = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x.clone());
        let dv = g.param(delta.clone());
        let input = g.add(xv, dv)?;
        let mut per_model = Vec::with_capacity(models.len());
        for m in models {
            let p = m.register(&mut g, false);
            let out = m.forward(&mut g, &p, input)?;
            let losses = task_losses(&mut g, &out.heads, &kinds, targets)?;
            let terms: Vec<Var> = losses
                .iter()
                .zip(dirs)
                .map(|(&l, d)| g.scale(l, if *d == Direction::Descend { 1.0 / k } else { -1.0 / k }))
                .collect();
            per_model.push(g.add_all(&terms)?);
        }
        let sum = g.add_all(&per_model)?;
        let j = g.scale(sum, 1.0 / models.len() as f32);
        objective.push(g.value(j).item() as f64);
        let mut grads = g.backward(j)?;
        let grad = grads.take_or_zeros(dv, x.shape());
        for (v, gv) in delta.data_mut().iter_mut().zip(grad.data()) {
            if *gv > 0.0 {
                *v -= cfg.step_size;
            } else if *gv < 0.0 {
                *v += cfg.step_size;
            }
        }
        project(x.data(), delta.data_mut(), cfg.eps);
    }
    Ok(PgdOutcome { delta, objective })
}

/// Single-model PGD on a batch with true `targets`.
pub fn pgd(model: &MtlModel, x: &Tensor<f32>, targets: Vec<Targets>, cfg: &PgdConfig, mode: PgdMode) -> Result<Tensor<f32>> {
    let (t, dirs) = mode_targets(model.task_kinds(), targets, mode);
    Ok(pgd_ensemble(&[model], x, None, &t, &dirs, cfg)?.delta)
}

/// Runs PGD over a whole dataset in batches, optionally warm-starting from `init`.
pub fn pgd_dataset<D: TaskData>(
    models: &[&MtlModel],
    data: &D,
    init: Option<&Tensor<f32>>,
    mode: PgdMode,
    cfg: &PgdConfig,
    batch: usize,
) -> Result<Tensor<f32>> {
    let n = data.len();
    let kinds = data.task_kinds();
    let mut out = Vec::with_capacity(data.images().numel());
    for start in (0..n).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
        let x = data.images().select_rows(&idx)?;
        let init_b = init.map(|d| d.select_rows(&idx)).transpose()?;
        let targets = (0..kinds.len()).map(|k| data.targets(k, &idx)).collect();
        let (t, dirs) = mode_targets(&kinds, targets, mode);
        let r = pgd_ensemble(models, &x, init_b.as_ref(), &t, &dirs, cfg)?;
        out.extend_from_slice(r.delta.data());
    }
    Tensor::new(data.images().shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_mtl_model, Arch};
    use proptest::prelude::*;

    /// Global average pool followed by one linear head: logits are linear in x.
    fn linear_model(seed: u64) -> MtlModel {
        let arch = Arch {
            encoder: vec![],
            decoder: vec![],
        };
        build_mtl_model(arch, 2, &[TaskKind::Classification { classes: 3 }], seed).unwrap()
    }

    #[test]
    fn zero_steps_gives_zero() {
        let m = linear_model(0);
        let x = Tensor::full([2, 2, 3, 3], 0.5);
        let cfg = PgdConfig {
            eps: 0.03,
            steps: 0,
            step_size: 0.01,
        };
        let d = pgd(&m, &x, vec![Targets::Classes(vec![0, 1])], &cfg, PgdMode::Untargeted).unwrap();
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn one_untargeted_step_matches_closed_form() {
        let mut m = linear_model(3);
        m.params_mut()[1] = Tensor::new([3], vec![0.1, -0.2, 0.05]).unwrap();
        let (w, b) = (m.params()[0].clone(), m.params()[1].clone());
        let x = Tensor::from_fn([1, 2, 2, 2], |i| 0.3 + 0.05 * i as f32);
        let y = 2;
        let eps = 0.02;
        let cfg = PgdConfig {
            eps,
            steps: 1,
            step_size: eps,
        };
        let d = pgd(&m, &x, vec![Targets::Classes(vec![y])], &cfg, PgdMode::Untargeted).unwrap();
        // logits = W·mean_c(x) + b; dL/dx[c,p] = (1/HW) Σ_j (softmax_j − 1[j=y]) W[j,c]
        let mean: Vec<f64> = (0..2).map(|c| x.data()[c * 4..c * 4 + 4].iter().map(|&v| v as f64).sum::<f64>() / 4.0).collect();
        let logits: Vec<f64> = (0..3).map(|j| (0..2).map(|c| w.data()[j * 2 + c] as f64 * mean[c]).sum::<f64>() + b.data()[j] as f64).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..2 {
            let g: f64 = (0..3).map(|j| (logits[j].exp() / z - if j == y { 1.0 } else { 0.0 }) * w.data()[j * 2 + c] as f64).sum();
            for p in 0..4 {
                let v = d.data()[c * 4 + p];
                assert_eq!(v.signum(), g.signum() as f32);
                assert!((v.abs() - eps).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ensemble_of_one_is_plain_pgd() {
        let m = linear_model(1);
        let x = Tensor::from_fn([2, 2, 3, 3], |i| (i % 7) as f32 / 7.0);
        let cfg = PgdConfig {
            eps: 0.03,
            steps: 4,
            step_size: 0.01,
        };
        let t = vec![Targets::Classes(vec![0, 2])];
        let a = pgd(&m, &x, t.clone(), &cfg, PgdMode::Targeted).unwrap();
        let (tt, dirs) = mode_targets(m.task_kinds(), t, PgdMode::Targeted);
        let b = pgd_ensemble(&[&m, &m], &x, None, &tt, &dirs, &cfg).unwrap().delta;
        assert!(a.bit_eq(&b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn projection_holds_after_every_step(seed in any::<u64>(), steps in 0usize..6, eps in 0.001f32..0.1) {
            let m = linear_model(seed);
            let x = Tensor::from_fn([2, 2, 2, 2], |i| ((i as u64 * 2654435761 ^ seed) % 101) as f32 / 100.0);
            for mode in [PgdMode::Targeted, PgdMode::Untargeted, PgdMode::Minimize] {
                let cfg = PgdConfig { eps, steps, step_size: eps / 2.0 };
                let d = pgd(&m, &x, vec![Targets::Classes(vec![0, 1])], &cfg, mode).unwrap();
                prop_assert!(d.data().iter().all(|v| v.abs() <= eps));
                prop_assert!(d.data().iter().zip(x.data()).all(|(v, xi)| (0.0..=1.0).contains(&(xi + v))));
            }
        }

        #[test]
        fn untargeted_loss_is_monotone_on_linear_model(seed in any::<u64>(), y in 0usize..3) {
            let m = linear_model(seed);
            let x = Tensor::from_fn([1, 2, 3, 3], |i| 0.2 + ((i as u64 ^ seed) % 13) as f32 / 30.0);
            let cfg = PgdConfig { eps: 0.05, steps: 8, step_size: 0.01 };
            let (t, dirs) = mode_targets(m.task_kinds(), vec![Targets::Classes(vec![y])], PgdMode::Untargeted);
            let out = pgd_ensemble(&[&m], &x, None, &t, &dirs, &cfg).unwrap();
            // objective is the negated loss, so it must not increase
            for w in out.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-6, "{:?}", out.objective);
            }
        }
    }
}
