//! Experiments: datasets, optimizer, training loop, persistence,
//! diagnostics and presets.

mod checkpoint;
mod config;
mod data;
mod diagnostics;
mod metrics;
mod optim;
mod presets;
mod train;

use crate::diffcore::DiffError;
use crate::energies::EnergyError;
use crate::objectives::ObjectiveError;
use crate::replay::ReplayError;
use crate::sampling::SamplingError;

pub use checkpoint::Checkpoint;
pub use config::{apply_override, parse_override, EnergySpec, ExperimentConfig, MonitorConfig, OutputConfig};
pub use data::{digit_template, load_idx, mode_centers, read_idx, write_idx, Dataset, DatasetSpec, IdxImages, ModeLayout};
pub use diagnostics::{
    chain_mixing_rates, default_delta, median, mixing_rate, mode_coverage, probe_inits, spurious_minima_probe, ProbeReport,
};
pub use metrics::{emit_metrics, parse_metrics, write_metrics, MetricsFormat, MetricsLog, MetricsRecord};
pub use optim::{adam_step, clip_global, AdamConfig, AdamState, StepReport};
pub use presets::{mixture_dataset, mixture_noise, mixture_sampler, preset, MIXTURE_BOX, PRESETS};
pub use train::{grad_audit, resolve_sampler, train, AuditRecord, GradAudit, TrainOutcome, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("idx: {0}")]
    Idx(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training step {step}: {source}")]
    Step {
        step: u64,
        #[source]
        source: Box<LabError>,
    },
}
