//! Experiment pipeline: data, expert splits, checkpoints, fine-tuning and
//! the end-to-end run.

pub mod checkpoint;
pub mod data;
pub mod evaluate;
pub mod experiment;
pub mod finetune;
pub mod split;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use data::{synth_dataset, DatasetKind, DatasetSpec, DomainShift, SplitCounts, SynthData};
pub use evaluate::{evaluate, Metrics};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentSummary, Method};
pub use finetune::finetune;
pub use split::{dirichlet_split, ExpertSplit, SplitSpec};
