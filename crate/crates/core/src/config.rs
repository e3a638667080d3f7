//! Experiment configuration: one JSON document describing data, attack, victims,
//! defenses and seeds.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::attacks::{Bound, EmConfig, PatternKind, SurrogateConfig, TapConfig, DEFAULT_EPS};
use crate::data::manifest::sha256_hex;
use crate::data::{DenseSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::generator::{BaseUe, GenTrainConfig};
use crate::harness::Defense;
use crate::models::{Arch, Strategy, TrainHyper};

/// Where the data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    /// Synthetic multi-attribute classification images.
    Classification(SynthSpec),
    /// Synthetic scenes with segmentation and depth-like regression.
    Dense(DenseSpec),
    /// A dataset directory written by `gen-data`.
    Path { path: PathBuf },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Classification(SynthSpec::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Class-wise patterns, one per task, averaged over the full image.
    ClasswiseAvg,
    /// Class-wise patterns, one per task, tiled into patches.
    ClasswisePatch,
    Em,
    Tap,
    Sep,
    #[default]
    MtlueEm,
    MtlueTap,
    MtlueSep,
    /// No poisoning: victims train on clean data.
    None,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::ClasswiseAvg,
        Method::ClasswisePatch,
        Method::Em,
        Method::Tap,
        Method::Sep,
        Method::MtlueEm,
        Method::MtlueTap,
        Method::MtlueSep,
        Method::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ClasswiseAvg => "classwise-avg",
            Method::ClasswisePatch => "classwise-patch",
            Method::Em => "em",
            Method::Tap => "tap",
            Method::Sep => "sep",
            Method::MtlueEm => "mtlue-em",
            Method::MtlueTap => "mtlue-tap",
            Method::MtlueSep => "mtlue-sep",
            Method::None => "none",
        }
    }

    /// Base method of a generator-driven attack.
    pub fn generator_base(self) -> Option<BaseUe> {
        match self {
            Method::MtlueEm => Some(BaseUe::Em),
            Method::MtlueTap => Some(BaseUe::Tap),
            Method::MtlueSep => Some(BaseUe::Sep),
            _ => None,
        }
    }

    /// Whether crafting needs clean-trained surrogate checkpoints.
    pub fn needs_pretrained(self) -> bool {
        matches!(self, Method::Tap | Method::Sep | Method::MtlueTap | Method::MtlueSep)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Per-pixel bound `epsilon`.
    #[default]
    Linf,
    /// Per-image ℓ2 radius scaled with the image area.
    L2,
}

/// Class-wise pattern settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PatternSettings {
    pub kind: PatternKind,
    pub norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub method: Method,
    /// ℓ∞ budget ε for every sample-wise method (and for class-wise ℓ∞ patterns).
    #[serde(alias = "ε", alias = "eps")]
    pub epsilon: f32,
    /// Weight λ1 of the intra-task embedding regularizer.
    #[serde(alias = "λ1")]
    pub lambda1: f64,
    /// Weight λ2 of the inter-task embedding regularizer.
    #[serde(alias = "λ2")]
    pub lambda2: f64,
    pub pattern: PatternSettings,
    pub em: EmConfig,
    pub tap: TapConfig,
    pub generator: GenTrainConfig,
    /// Surrogate architecture, weighting and optimizer.
    pub surrogate: SurrogateConfig,
    /// Clean pretraining of surrogates for targeted methods.
    pub surrogate_train: TrainHyper,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            method: Method::default(),
            epsilon: DEFAULT_EPS,
            lambda1: 20.0,
            lambda2: 100.0,
            pattern: PatternSettings::default(),
            em: EmConfig::default(),
            tap: TapConfig::default(),
            generator: GenTrainConfig::default(),
            surrogate: SurrogateConfig::default(),
            surrogate_train: TrainHyper::default(),
        }
    }
}

impl AttackSpec {
    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            eps: self.epsilon,
            ..self.em.clone()
        }
    }

    pub fn tap_config(&self) -> TapConfig {
        TapConfig {
            eps: self.epsilon,
            ..self.tap.clone()
        }
    }

    /// Generator training settings for a base method.
    pub fn generator_config(&self, base: BaseUe) -> GenTrainConfig {
        GenTrainConfig {
            base,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            eps: self.epsilon,
            train_surrogate: base == BaseUe::Em,
            ..self.generator.clone()
        }
    }

    /// Bound used by class-wise patterns on `h×w` images.
    pub fn pattern_bound(&self, h: usize, w: usize) -> Bound {
        match self.pattern.norm {
            Norm::Linf => Bound::Linf { eps: self.epsilon },
            Norm::L2 => Bound::l2_for_image(h, w),
        }
    }

    /// Number of surrogate checkpoints a targeted method attacks.
    pub fn checkpoint_count(&self) -> usize {
        match self.method {
            Method::Sep | Method::MtlueSep => self.tap.checkpoints,
            _ => 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::validation("attack.ε", format!("budget must lie in (0, 1], got {}", self.epsilon)));
        }
        for (name, v) in [("attack.λ1", self.lambda1), ("attack.λ2", self.lambda2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.surrogate.lr > 0.0 && self.surrogate.lr.is_finite()) || self.surrogate.batch == 0 {
            return Err(Error::validation("attack.surrogate", "need a positive learning rate and batch size"));
        }
        match self.method {
            Method::Em => self.em_config().validate()?,
            Method::Tap | Method::Sep => self.tap_config().validate()?,
            m => {
                if let Some(base) = m.generator_base() {
                    self.generator_config(base).validate()?;
                    if base != BaseUe::Em {
                        self.tap_config().validate()?;
                    }
                }
            }
        }
        if self.method.needs_pretrained() {
            self.surrogate_train.validate("attack.surrogate_train")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSpec {
    /// One multi-task victim per weighting strategy.
    pub mtl: Vec<Strategy>,
    /// Also train one single-task victim per task.
    pub stl: bool,
    /// Victim architecture; the dataset's default when absent.
    pub arch: Option<Arch>,
    pub train: TrainHyper,
    /// Train the same victims on clean data for reference.
    pub clean_baseline: bool,
}

impl Default for VictimSpec {
    fn default() -> Self {
        Self {
            mtl: vec![Strategy::Ls],
            stl: true,
            arch: None,
            train: TrainHyper::default(),
            clean_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub attack: AttackSpec,
    /// Indices of protected tasks; every task when absent.
    pub protect: Option<Vec<usize>>,
    /// Fraction of training samples that receive their perturbation.
    pub mix_ratio: f64,
    pub victims: VictimSpec,
    pub defenses: Vec<Defense>,
    /// Master seed; data, attack, mixing and victims use seeds derived from it.
    pub seed: u64,
    /// Directory for the report and artifacts. Not part of the config hash.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            attack: AttackSpec::default(),
            protect: None,
            mix_ratio: 1.0,
            victims: VictimSpec::default(),
            defenses: Vec::new(),
            seed: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON; syntax and type errors carry their line and column. The result is
    /// not validated.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Number of tasks, when it is known without reading data from disk.
    pub fn known_task_count(&self) -> Option<usize> {
        match &self.dataset {
            DatasetSource::Classification(s) => Some(s.class_counts.len()),
            DatasetSource::Dense(_) => Some(2),
            DatasetSource::Path { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSource::Classification(s) => s.validate()?,
            DatasetSource::Dense(s) => s.validate()?,
            DatasetSource::Path { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::validation("dataset.path", "must not be empty"));
                }
            }
        }
        self.attack.validate()?;
        if let Some(p) = &self.protect {
            if p.is_empty() {
                return Err(Error::validation("protect", "at least one task must be protected"));
            }
            let mut sorted = p.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != p.len() {
                return Err(Error::validation("protect", "task indices must be distinct"));
            }
            if let Some(k) = self.known_task_count() {
                if let Some(&bad) = p.iter().find(|&&t| t >= k) {
                    return Err(Error::validation("protect", format!("task {bad} does not exist ({k} tasks)")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::validation("mix_ratio", format!("must lie in [0, 1], got {}", self.mix_ratio)));
        }
        self.victims.train.validate("victims.train")?;
        for d in &self.defenses {
            d.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn config_hash(&self) -> String {
        let canonical = Self {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        sha256_hex(&bytes)
    }

    /// Seed for a named stage.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        crate::rng::derive_seed(self.seed, stage)
    }
}

/// JSON schema of [`ExperimentConfig`].
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.attack.epsilon, 8.0 / 255.0);
        assert_eq!((c.attack.lambda1, c.attack.lambda2, c.mix_ratio), (20.0, 100.0, 1.0));
        c.validate().unwrap();
    }

    #[test]
    fn greek_aliases() {
        let c = ExperimentConfig::from_json(r#"{"attack": {"method": "tap", "ε": 0.02, "λ1": 1, "λ2": 2}}"#).unwrap();
        assert_eq!(c.attack.method, Method::Tap);
        assert_eq!((c.attack.epsilon, c.attack.lambda1, c.attack.lambda2), (0.02, 1.0, 2.0));
    }

    #[test]
    fn parse_errors_have_position() {
        let err = ExperimentConfig::from_json("{\n  \"seed\": 1,\n  \"mix_ratio\": ]\n}").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (3, 16)),
            e => panic!("{e}"),
        }
        assert!(matches!(ExperimentConfig::from_json(r#"{"attack": {"method": "bogus"}}"#), Err(Error::Parse { line: 1, .. })));
        assert!(ExperimentConfig::from_json(r#"{"unknown": 1}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let c = ExperimentConfig::from_json(r#"{"attack": {"epsilon": -1}}"#).unwrap();
        match c.validate().unwrap_err() {
            Error::Validation { field, .. } => assert!(field.contains('ε')),
            e => panic!("{e}"),
        }
        let c = ExperimentConfig::from_json(r#"{"protect": [0, 9]}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "protect"));
        let c = ExperimentConfig::from_json(r#"{"mix_ratio": 2}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "mix_ratio"));
    }

    #[test]
    fn every_method_parses() {
        for m in Method::ALL {
            let c = ExperimentConfig::from_json(&format!(r#"{{"attack": {{"method": "{}"}}}}"#, m.name())).unwrap();
            assert_eq!(c.attack.method, m);
            c.validate().unwrap();
        }
    }

    #[test]
    fn hash_ignores_output_dir_and_round_trips() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
        let back = ExperimentConfig::from_json(&b.to_json().unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn dataset_variants() {
        let c = ExperimentConfig::from_json(r#"{"dataset": {"kind": "dense", "n_train": 20}}"#).unwrap();
        assert!(matches!(c.dataset, DatasetSource::Dense(DenseSpec { n_train: 20, .. })));
        let c = ExperimentConfig::from_json(r#"{"dataset": {"kind": "path", "path": "data"}}"#).unwrap();
        assert!(matches!(c.dataset, DatasetSource::Path { .. }));
    }
}
