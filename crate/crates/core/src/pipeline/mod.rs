//! Dataset, configuration, and command layer gluing the scanner, the noise
//! model, and the networks into the simulate → train → generate → evaluate
//! workflow. Everything is seed-keyed and bit-reproducible.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod manifest;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_simulate, cmd_train, EvaluateSummary, GenerateSummary,
    SimulateSummary, TrainSummary,
};
pub use config::RunConfig;
pub use dataset::make_multidose_set;
pub use manifest::Manifest;
