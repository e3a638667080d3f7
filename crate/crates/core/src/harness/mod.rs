//! Evaluation harness: partial poisoning, defenses, feature statistics, and the
//! end-to-end experiment runner.

pub mod defense;
pub mod experiment;
pub mod metrics;
pub mod mix;
pub mod subset;

pub use defense::{defense_transform, Defense};
pub use experiment::{
    class_labels, craft, default_arch, feature_intra_class_std, load_data, run_experiment, run_experiment_with, train_victims, AttackInfo,
    CraftOutcome, Data, DefenseResult, EmbeddingSummary, ExperimentReport, IntraClassStd, MixInfo, VictimResult, VictimRun, REPORT_FILE,
};
pub use metrics::intra_class_relative_std;
pub use mix::{mix_partial, poisoned_indices};
pub use subset::TaskSubset;
