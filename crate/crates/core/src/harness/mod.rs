//! Desk-scale training harness: synthetic task, small transformer with frozen
//! spectral corrections, AdamW, and probes that log conditioning trajectories.

pub mod model;
pub mod optim;
pub mod task;
pub mod train;

pub use model::{forward_layer, LayerOptions, LayerParams, Model, ModelParams, TransformerConfig};
pub use optim::{AdamW, OptimizerConfig};
pub use task::{
    oracle_label, probe_examples, synth_task, synth_task_with_len, Dataset, Example, CLASSES, SEQ_LEN, VOCAB,
};
pub use train::{
    ablate_lambda, flops_estimate, flops_overhead, probe, train, AblationRow, AblationTable, Divergence, FlopsEstimate,
    MetricsRow, RunOutcome, RunSpec, TrainRun,
};
