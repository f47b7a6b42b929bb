//! Experiment harness: skill collection, metrics, the friction-work
//! baseline, energy heat maps, the contact-loss experiment and the pipeline
//! stages behind the `etank` binary.

pub mod collect;
pub mod config;
pub mod heatmap;
pub mod metrics;
pub mod pipeline;
pub mod safety;

pub use config::ExperimentConfig;
