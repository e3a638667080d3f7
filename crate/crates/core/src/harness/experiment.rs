//! End-to-end experiment: data, crafting, partial poisoning, victim training, metrics
//! and defenses, with every artifact persisted next to the report.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{defense_transform, intra_class_relative_std, mix_partial, poisoned_indices, TaskSubset};
use crate::attacks::{
    craft_classwise, craft_em, craft_tap_sep, make_classwise_patterns, patch_grid, poison_dataset, train_checkpoints, Geometry, PatternSpec,
    PerturbationSet, SurrogateConfig,
};
use crate::config::{DatasetSource, ExperimentConfig, Method};
use crate::data::manifest::{load_classification, load_dense, read_manifest, DatasetManifest};
use crate::data::{generate_classification_mtl, generate_dense_mtl, DenseDataset, MultiTaskDataset, Split, TaskData, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::generator::{craft_with_generator, embedding_stats, save_generator, train_generator, PerturbGenerator, ProtectionMask};
use crate::models::{build_mtl_model, evaluate_model, model_hash, save_model, train_model, Arch, EvalReport, MtlModel, Strategy};

const FEATURE_BATCH: usize = 256;
const CRAFT_BATCH: usize = 128;
pub const REPORT_FILE: &str = "report.json";

/// A train/test pair of either dataset family.
#[derive(Clone, Debug)]
pub enum Data {
    Classification { train: MultiTaskDataset, test: MultiTaskDataset },
    Dense { train: DenseDataset, test: DenseDataset },
}

/// Generates (with the `data` stage seed) or loads the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let seed = cfg.stage_seed("data");
    Ok(match &cfg.dataset {
        DatasetSource::Classification(spec) => {
            let (train, test) = generate_classification_mtl(spec, seed)?;
            Data::Classification { train, test }
        }
        DatasetSource::Dense(spec) => {
            let (train, test) = generate_dense_mtl(spec, seed)?;
            Data::Dense { train, test }
        }
        DatasetSource::Path { path } => match read_manifest(path)? {
            DatasetManifest::Classification { .. } => {
                let (train, test) = load_classification(path)?;
                Data::Classification { train, test }
            }
            DatasetManifest::Dense { .. } => {
                let (train, test) = load_dense(path)?;
                Data::Dense { train, test }
            }
        },
    })
}

/// Default model architecture for a task set.
pub fn default_arch(kinds: &[TaskKind]) -> Arch {
    if kinds.iter().any(TaskKind::is_dense) {
        Arch::dense_default()
    } else {
        Arch::classification_default()
    }
}

/// Surrogate settings with a per-image architecture swapped for the dense default on
/// per-pixel tasks.
fn resolve_surrogate(cfg: &SurrogateConfig, kinds: &[TaskKind]) -> SurrogateConfig {
    let mut s = cfg.clone();
    if kinds.iter().any(TaskKind::is_dense) && s.arch.decoder.is_empty() {
        s.arch = Arch::dense_default();
    }
    s
}

/// Per-image labels of `tasks` as a row-major `[N, tasks.len()]` table plus class counts.
pub fn class_labels<D: TaskData>(data: &D, tasks: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let kinds = data.task_kinds();
    let mut counts = Vec::with_capacity(tasks.len());
    let mut cols = Vec::with_capacity(tasks.len());
    for &t in tasks {
        match (kinds[t], data.targets(t, &all)) {
            (TaskKind::Classification { classes }, Targets::Classes(v)) => {
                counts.push(classes);
                cols.push(v);
            }
            _ => return Err(Error::invalid(format!("task {t} has no per-image class labels"))),
        }
    }
    let labels = (0..data.len()).flat_map(|i| cols.iter().map(move |c| c[i])).collect();
    Ok((labels, counts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSummary {
    pub initial_intra_er: Option<f64>,
    pub initial_inter_er: Option<f64>,
    pub final_intra_er: Option<f64>,
    pub final_inter_er: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackInfo {
    pub method: String,
    pub protected: Vec<usize>,
    /// Largest absolute perturbation entry.
    pub max_abs_delta: f64,
    pub surrogate_hash: Option<String>,
    /// Surrogate checkpoints attacked (targeted methods).
    pub checkpoints: usize,
    /// Error-minimizing outer iterations and final surrogate accuracy.
    pub outer_loops: Option<usize>,
    pub surrogate_accuracy: Option<f64>,
    pub embedding: Option<EmbeddingSummary>,
    /// Mean base loss per generator training epoch (generator methods only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generator_loss: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CraftOutcome {
    /// `None` for the no-attack method.
    pub set: Option<PerturbationSet>,
    pub generator: Option<PerturbGenerator>,
    pub info: AttackInfo,
}

fn protected_tasks(cfg: &ExperimentConfig, k: usize) -> Result<Vec<usize>> {
    match &cfg.protect {
        None => Ok((0..k).collect()),
        Some(p) => {
            if let Some(&bad) = p.iter().find(|&&t| t >= k) {
                return Err(Error::validation("protect", format!("task {bad} does not exist ({k} tasks)")));
            }
            let mut p = p.clone();
            p.sort_unstable();
            Ok(p)
        }
    }
}

fn pretrained<D: TaskData>(cfg: &ExperimentConfig, data: &D, seed: u64) -> Result<Vec<MtlModel>> {
    let a = &cfg.attack;
    let sur = resolve_surrogate(&a.surrogate, &data.task_kinds());
    let model = build_mtl_model(sur.arch, data.image_dims()[0], &data.task_kinds(), crate::rng::derive_seed(seed, "pretrain/init"))?;
    let hyper = crate::models::TrainHyper {
        lr: sur.lr,
        batch: sur.batch,
        ..a.surrogate_train.clone()
    };
    train_checkpoints(model, data, &hyper, sur.strategy, a.checkpoint_count(), crate::rng::derive_seed(seed, "pretrain"))
}

/// Crafts perturbations for every sample of `train` with the configured method.
///
/// Sample-wise baselines only see the protected tasks; the generator sees every task
/// and leaves unprotected tasks unconditioned when crafting.
pub fn craft<D: TaskData>(cfg: &ExperimentConfig, train: &D) -> Result<CraftOutcome> {
    let a = &cfg.attack;
    let seed = cfg.stage_seed("attack");
    let protected = protected_tasks(cfg, train.num_tasks())?;
    let mut info = AttackInfo {
        method: a.method.name().to_string(),
        protected: protected.clone(),
        max_abs_delta: 0.0,
        surrogate_hash: None,
        checkpoints: 0,
        outer_loops: None,
        surrogate_accuracy: None,
        embedding: None,
        generator_loss: Vec::new(),
    };
    let mut generator = None;
    let set = match a.method {
        Method::None => None,
        Method::ClasswiseAvg | Method::ClasswisePatch => {
            let (labels, counts) = class_labels(train, &protected)?;
            let view = MultiTaskDataset::new(train.images().clone(), labels, counts.clone(), Split::Train)?;
            let [_, h, w] = train.image_dims();
            let geometry = if a.method == Method::ClasswiseAvg {
                Geometry::Full
            } else {
                Geometry::Patch {
                    grid: patch_grid(counts.len(), h, w)?,
                }
            };
            let spec = PatternSpec {
                kind: a.pattern.kind,
                bound: a.pattern_bound(h, w),
            };
            let bank = make_classwise_patterns(&spec, geometry, train.image_dims(), &counts, seed)?;
            Some(PerturbationSet::new(craft_classwise(&bank, &view)?, spec.bound, a.method.name(), seed)?)
        }
        Method::Em => {
            let sub = TaskSubset::new(train.clone(), protected.clone())?;
            let sur = resolve_surrogate(&a.surrogate, &sub.task_kinds());
            let out = craft_em(&sub, &sur, &a.em_config(), seed)?;
            info.outer_loops = Some(out.outer_loops);
            info.surrogate_accuracy = Some(out.final_accuracy);
            Some(out.set)
        }
        Method::Tap | Method::Sep => {
            let sub = TaskSubset::new(train.clone(), protected.clone())?;
            let mut checkpoints = pretrained(cfg, &sub, seed)?;
            if a.method == Method::Tap {
                checkpoints.drain(..checkpoints.len() - 1);
            }
            info.checkpoints = checkpoints.len();
            Some(craft_tap_sep(&sub, &checkpoints, &a.tap_config(), seed)?)
        }
        Method::MtlueEm | Method::MtlueTap | Method::MtlueSep => {
            let base = a.method.generator_base().expect("generator method");
            let gcfg = a.generator_config(base);
            let mut pre = if a.method.needs_pretrained() { pretrained(cfg, train, seed)? } else { Vec::new() };
            if a.method == Method::MtlueTap {
                pre.drain(..pre.len() - 1);
            }
            info.checkpoints = pre.len();
            let sur = resolve_surrogate(&a.surrogate, &train.task_kinds());
            let out = train_generator(train, &sur, &pre, &gcfg, seed)?;
            let (final_intra, final_inter) = embedding_stats(&out.generator);
            info.generator_loss = out.history.iter().map(|h| h.base_loss).collect();
            info.embedding = Some(EmbeddingSummary {
                initial_intra_er: out.initial_intra,
                initial_inter_er: out.initial_inter,
                final_intra_er: final_intra,
                final_inter_er: final_inter,
            });
            let mask = ProtectionMask::only(train.num_tasks(), &protected)?;
            let mut set = craft_with_generator(&out.generator, train, &mask, a.method.name(), seed, CRAFT_BATCH)?;
            set.surrogate_hash = out.surrogate.as_ref().or(pre.last()).map(model_hash);
            generator = Some(out.generator);
            Some(set)
        }
    };
    if let Some(s) = &set {
        s.check_bound()?;
        info.max_abs_delta = s.deltas.max_abs() as f64;
        if info.surrogate_hash.is_none() {
            info.surrogate_hash = s.surrogate_hash.clone();
        }
    }
    Ok(CraftOutcome { set, generator, info })
}

/// Evaluation of one trained victim on the clean test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VictimResult {
    /// `mtl-<strategy>` or `stl-task<k>`.
    pub victim: String,
    pub split: Split,
    /// What the victim trained on: `clean`, `poisoned`, or `poisoned+<defense>`.
    pub training_data: String,
    pub tasks: Vec<usize>,
    pub strategy: Strategy,
    /// Per-task metrics, in the order of `tasks`.
    pub metrics: EvalReport,
    pub model_hash: String,
}

impl VictimResult {
    /// Accuracy-like score of task `k` (dataset index), if this victim learned it.
    pub fn task_accuracy(&self, k: usize) -> Option<f64> {
        let i = self.tasks.iter().position(|&t| t == k)?;
        self.metrics.tasks[i].accuracy()
    }
}

/// Trained victims; models are kept for feature analysis and checkpointing.
pub struct VictimRun {
    pub results: Vec<VictimResult>,
    pub models: Vec<MtlModel>,
}

/// Trains the configured MTL and STL victims on `train` and evaluates them on `test`.
/// Seeds depend only on the victim id, so clean and poisoned runs are paired.
pub fn train_victims<D: TaskData>(cfg: &ExperimentConfig, train: &D, test: &D, training_data: &str) -> Result<VictimRun> {
    let v = &cfg.victims;
    let k = train.num_tasks();
    let mut jobs: Vec<(String, Vec<usize>, Strategy)> = v.mtl.iter().map(|s| (format!("mtl-{}", s.name()), (0..k).collect(), *s)).collect();
    if v.stl {
        jobs.extend((0..k).map(|t| (format!("stl-task{t}"), vec![t], Strategy::Ls)));
    }
    let mut run = VictimRun {
        results: Vec::new(),
        models: Vec::new(),
    };
    for (id, tasks, strategy) in jobs {
        let seed = cfg.stage_seed(&format!("victim/{id}"));
        let tr = TaskSubset::new(train.clone(), tasks.clone())?;
        let te = TaskSubset::new(test.clone(), tasks.clone())?;
        let kinds = tr.task_kinds();
        let arch = v.arch.clone().unwrap_or_else(|| default_arch(&kinds));
        let mut model = build_mtl_model(arch, tr.image_dims()[0], &kinds, crate::rng::derive_seed(seed, "init"))?;
        train_model(&mut model, &tr, &v.train, strategy, seed)?;
        run.results.push(VictimResult {
            victim: id,
            split: Split::Test,
            training_data: training_data.to_string(),
            tasks,
            strategy,
            metrics: evaluate_model(&model, &te)?,
            model_hash: model_hash(&model),
        });
        run.models.push(model);
    }
    Ok(run)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraClassStd {
    pub avg: f64,
    pub max: f64,
}

/// Relative intra-class std of `model`'s pooled features on `data`.
pub fn feature_intra_class_std<D: TaskData>(model: &MtlModel, data: &D) -> Result<IntraClassStd> {
    let all: Vec<usize> = (0..data.num_tasks()).collect();
    let (labels, counts) = class_labels(data, &all)?;
    let features = model.features(data.images(), FEATURE_BATCH)?;
    let (avg, max) = intra_class_relative_std(&features, &labels, &counts)?;
    Ok(IntraClassStd { avg, max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixInfo {
    pub ratio: f64,
    pub poisoned_samples: usize,
    pub total_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseResult {
    pub defense: String,
    pub victims: Vec<VictimResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seed: u64,
    /// The configuration, without its output directory.
    pub config: ExperimentConfig,
    pub attack: AttackInfo,
    pub mix: MixInfo,
    pub victims: Vec<VictimResult>,
    pub clean_baseline: Vec<VictimResult>,
    /// Of the first MTL victim's features on its training set; classification only.
    pub intra_class_std: Option<IntraClassStd>,
    pub defenses: Vec<DefenseResult>,
    pub wall_clock_secs: f64,
    pub created_unix: u64,
}

impl ExperimentReport {
    /// Field names that vary between otherwise identical runs.
    pub const VOLATILE_FIELDS: [&'static str; 2] = ["wall_clock_secs", "created_unix"];

    pub fn victim(&self, id: &str) -> Option<&VictimResult> {
        self.victims.iter().find(|v| v.victim == id)
    }

    pub fn baseline(&self, id: &str) -> Option<&VictimResult> {
        self.clean_baseline.iter().find(|v| v.victim == id)
    }

    /// Canonical JSON with the volatile fields removed.
    pub fn stable_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(obj) = v.as_object_mut() {
            for f in Self::VOLATILE_FIELDS {
                obj.remove(f);
            }
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Runs the configured experiment, persisting everything under `output_dir` if set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, None)
}

/// Like [`run_experiment`], reusing already trained clean-baseline results.
pub fn run_experiment_with(cfg: &ExperimentConfig, baseline: Option<&[VictimResult]>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    match load_data(cfg)? {
        Data::Classification { train, test } => run_on(cfg, &train, &test, baseline, start),
        Data::Dense { train, test } => run_on(cfg, &train, &test, baseline, start),
    }
}

struct Artifacts<'a> {
    set: Option<&'a PerturbationSet>,
    generator: Option<&'a PerturbGenerator>,
    victims: &'a [(String, MtlModel, Strategy)],
}

fn run_on<D: TaskData>(cfg: &ExperimentConfig, train: &D, test: &D, baseline: Option<&[VictimResult]>, start: Instant) -> Result<ExperimentReport> {
    let hash = cfg.config_hash();
    if let Some(dir) = &cfg.output_dir {
        if dir.join(REPORT_FILE).exists() {
            return Err(Error::ArtifactExists(dir.join(REPORT_FILE)));
        }
    }
    let crafted = craft(cfg, train)?;
    let poisoned = match &crafted.set {
        Some(set) => poison_dataset(train, set)?,
        None => train.clone(),
    };
    let mix_seed = cfg.stage_seed("mix");
    let mixed = mix_partial(train, &poisoned, cfg.mix_ratio, mix_seed)?;
    let poisoned_samples = if crafted.set.is_some() { poisoned_indices(train.len(), cfg.mix_ratio, mix_seed)?.len() } else { 0 };

    let victims = train_victims(cfg, &mixed, test, if poisoned_samples > 0 { "poisoned" } else { "clean" })?;
    let unchanged = mixed.images().bit_eq(train.images());
    let clean_baseline = match baseline {
        Some(b) => b.to_vec(),
        None if !cfg.victims.clean_baseline => Vec::new(),
        None if unchanged => victims.results.iter().cloned().map(|r| VictimResult { training_data: "clean".into(), ..r }).collect(),
        None => train_victims(cfg, train, test, "clean")?.results,
    };
    let intra_class_std = match victims.results.iter().position(|r| r.victim.starts_with("mtl-")) {
        Some(i) if test.task_kinds().iter().all(|k| !k.is_dense()) => Some(feature_intra_class_std(&victims.models[i], &mixed)?),
        _ => None,
    };

    let mut defenses = Vec::new();
    for &d in &cfg.defenses {
        let tr = mixed.with_images(defense_transform(mixed.images(), d)?)?;
        let te = test.with_images(defense_transform(test.images(), d)?)?;
        let run = train_victims(cfg, &tr, &te, &format!("poisoned+{}", d.name()))?;
        defenses.push(DefenseResult {
            defense: d.name(),
            victims: run.results,
        });
    }

    let report = ExperimentReport {
        config_hash: hash.clone(),
        seed: cfg.seed,
        config: ExperimentConfig {
            output_dir: None,
            ..cfg.clone()
        },
        attack: crafted.info.clone(),
        mix: MixInfo {
            ratio: cfg.mix_ratio,
            poisoned_samples,
            total_samples: train.len(),
        },
        victims: victims.results.clone(),
        clean_baseline,
        intra_class_std,
        defenses,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    if let Some(dir) = &cfg.output_dir {
        let named: Vec<(String, MtlModel, Strategy)> = victims.results.iter().zip(victims.models).map(|(r, m)| (r.victim.clone(), m, r.strategy)).collect();
        persist(
            dir,
            &report,
            Artifacts {
                set: crafted.set.as_ref(),
                generator: crafted.generator.as_ref(),
                victims: &named,
            },
        )?;
    }
    Ok(report)
}

fn persist(dir: &Path, report: &ExperimentReport, a: Artifacts) -> Result<()> {
    let (hash, seed) = (report.config_hash.as_str(), report.seed);
    if let Some(set) = a.set {
        set.save(&dir.join("perturbations"), "deltas", hash)?;
    }
    if let Some(g) = a.generator {
        save_generator(&dir.join("generator"), g, report.config.attack.lambda1, report.config.attack.lambda2, seed, hash)?;
    }
    for (id, model, strategy) in a.victims {
        save_model(&dir.join("victims").join(id), model, *strategy, seed, hash)?;
    }
    crate::data::container::write_new(&dir.join(REPORT_FILE), serde_json::to_string_pretty(report)?.as_bytes())
}
