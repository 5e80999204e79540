//! Langevin and Metropolis-adjusted Langevin chains.
//!
//! One step moves x to x − (λ/2)∇E(x) + ω with ω ~ N(0, σ²I). The step size
//! λ and noise std σ are independent knobs; [`SamplerConfig::theoretical`]
//! couples them as σ = √λ, which is the only setting where the unadjusted
//! chain approximates p_θ. Large λ with tiny σ behaves like noisy gradient
//! descent and is not a valid MCMC approximation.
//!
//! Chains run in batches (`[n, d]`, one generator per row). For each chain
//! and step the d Gaussian draws come first, then the MALA uniform, then any
//! transition randomness, so a chain's path depends only on its own stream.

mod chain;
mod tail;
mod transition;

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;
use crate::energies::{BoxBounds, EnergyError};

pub use chain::{
    langevin_step, mala_log_acceptance, mala_step, run_chains, run_chains_from, run_chains_parallel, run_chains_seeded,
    Chain, ChainRun, ChainStats,
};
pub use tail::{differentiable_tail, run_chain_differentiable, DiffChain};
pub use transition::{apply_transition, nearest_mode, TransitionOp};

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("non-finite {what} in chain {chain} at step {step}: energy {energy}, position {position:?}")]
    NonFinite {
        what: &'static str,
        chain: usize,
        step: u64,
        energy: f64,
        position: Vec<f64>,
    },
    #[error("transition layout mismatch: {0}")]
    Layout(String),
    #[error("differentiable tail of {steps} steps over {chains}x{dim} states exceeds the tape limit of {limit} entries")]
    TapeLimit {
        steps: usize,
        chains: usize,
        dim: usize,
        limit: usize,
    },
    #[error("{chains} chains but {streams} random streams")]
    Streams { chains: usize, streams: usize },
}

/// Periodic transition inside a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub op: TransitionOp,
    /// Applied after every `period`-th step.
    pub period: usize,
    /// Accept the move with probability min(1, e^{E(x) − E(x')}). Only valid
    /// for symmetric ops.
    #[serde(default)]
    pub metropolis: bool,
}

fn default_tape_limit() -> usize {
    5_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// λ
    pub step_size: f64,
    /// σ; ignored by the adjusted sampler, which always uses √λ.
    pub noise_std: f64,
    pub steps: usize,
    #[serde(default)]
    pub adjusted: bool,
    #[serde(default)]
    pub clamp_box: Option<BoxBounds>,
    #[serde(default)]
    pub augmentation: Option<Augmentation>,
    /// Keep every intermediate state and the per-step mean energy.
    #[serde(default)]
    pub trace: bool,
    /// Upper bound on `k · n · d` for differentiable tails.
    #[serde(default = "default_tape_limit")]
    pub tape_limit: usize,
}

impl Default for SamplerConfig {
    /// Training default: λ = 1, σ = 0.01, 60 steps, unadjusted.
    fn default() -> Self {
        Self {
            step_size: 1.0,
            noise_std: 0.01,
            steps: 60,
            adjusted: false,
            clamp_box: None,
            augmentation: None,
            trace: false,
            tape_limit: default_tape_limit(),
        }
    }
}

impl SamplerConfig {
    pub fn new(step_size: f64, noise_std: f64, steps: usize) -> Self {
        Self {
            step_size,
            noise_std,
            steps,
            ..Self::default()
        }
    }

    /// σ = √λ.
    pub fn theoretical(step_size: f64, steps: usize) -> Self {
        Self::new(step_size, step_size.sqrt(), steps)
    }

    /// Metropolis-adjusted chain with proposal std √λ.
    pub fn mala(step_size: f64, steps: usize) -> Self {
        Self {
            adjusted: true,
            ..Self::theoretical(step_size, steps)
        }
    }

    /// Raster preset: λ = 10, σ = 0.005, states clamped to [0, 1].
    pub fn raster(dim: usize, steps: usize) -> Self {
        Self {
            clamp_box: Some(BoxBounds::cube(dim, 0.0, 1.0).expect("non-empty box")),
            ..Self::new(10.0, 0.005, steps)
        }
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..self.clone() }
    }

    /// Effective proposal noise std.
    pub fn noise(&self) -> f64 {
        if self.adjusted {
            self.step_size.sqrt()
        } else {
            self.noise_std
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), SamplingError> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(SamplingError::Config(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(SamplingError::Config(format!("noise std {} must be non-negative", self.noise_std)));
        }
        if let Some(b) = &self.clamp_box {
            if b.dim() != dim && b.dim() != 1 {
                return Err(SamplingError::Config(format!(
                    "{}-dimensional clamp box for {}-dimensional states",
                    b.dim(),
                    dim
                )));
            }
        }
        if let Some(a) = &self.augmentation {
            if a.period == 0 {
                return Err(SamplingError::Config("augmentation period must be positive".into()));
            }
            if a.metropolis && !a.op.symmetric() {
                return Err(SamplingError::Config("metropolis test needs a symmetric transition".into()));
            }
            a.op.validate(dim)?;
        }
        Ok(())
    }
}
