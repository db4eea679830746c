//! Experiment harness: configuration, synthetic data and the staged
//! pipeline driven by the CLI.

pub mod catalog;
pub mod config;
pub mod experiment;
pub mod io;
pub mod scenarios;
pub mod synth;

pub use catalog::{builtin_catalog, DEFAULT_NOVEL};
pub use config::ExperimentConfig;
pub use experiment::{
    analyze, build_prototypes, diversity_sweep, encoder_statistics, generate_clients, infer_batch, make_encoders,
    run_in_memory, train_federation, AssessmentRow, Experiment, ExperimentOutcome, Headline, Manifest, PipelineOutcome,
    TrainOutcome, STANDARD_SWEEP_BETAS,
};
pub use scenarios::{geometric_loss_scenario, run_scripted, ScriptedClient};
pub use synth::{generate_synthetic_dataset, partition_non_iid, SyntheticData, TestSample};
