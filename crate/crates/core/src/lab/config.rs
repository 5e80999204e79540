use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energies::{BoxBounds, CompositeEnergy, EnergyModel, GridEnergy, MlpEnergy, QuadraticEnergy};
use crate::objectives::{ObjectiveSpec, Quadrature};
use crate::replay::InitPolicy;
use crate::rng::derive_seed;
use crate::sampling::SamplerConfig;

use super::data::{Dataset, DatasetSpec};
use super::metrics::MetricsFormat;
use super::optim::AdamConfig;
use super::LabError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnergySpec {
    /// ½p‖x − μ‖² with trainable μ (zeros when unset).
    Quadratic {
        #[serde(default)]
        mean: Option<Vec<f64>>,
        precision: f64,
    },
    /// Piecewise-linear interpolant with trainable node values.
    Grid {
        bounds: BoxBounds,
        resolution: Vec<usize>,
        #[serde(default)]
        init: f64,
    },
    Mlp {
        hidden: Vec<usize>,
        #[serde(default)]
        spectral_norm: bool,
    },
    /// Sum of MLP energies on average-pooled copies of a raster.
    Multiscale {
        factors: Vec<usize>,
        hidden: Vec<usize>,
        #[serde(default)]
        spectral_norm: bool,
    },
}

impl EnergySpec {
    pub fn build(&self, data: &Dataset, seed: u64) -> Result<Box<dyn EnergyModel>, LabError> {
        let d = data.dim();
        let seed = derive_seed(seed, "energy", &[]);
        let model: Box<dyn EnergyModel> = match self {
            EnergySpec::Quadratic { mean, precision } => {
                let mean = mean.clone().unwrap_or_else(|| vec![0.0; d]);
                Box::new(QuadraticEnergy::isotropic(mean, *precision)?)
            }
            EnergySpec::Grid { bounds, resolution, init } => {
                Box::new(GridEnergy::constant(bounds.clone(), resolution.clone(), *init)?)
            }
            EnergySpec::Mlp { hidden, spectral_norm } => {
                let m = MlpEnergy::new(d, hidden, seed)?;
                Box::new(if *spectral_norm { m.with_spectral_norm() } else { m })
            }
            EnergySpec::Multiscale {
                factors,
                hidden,
                spectral_norm,
            } => {
                let (h, w) = data
                    .raster
                    .ok_or_else(|| LabError::Config("multiscale energy needs image data".into()))?;
                Box::new(CompositeEnergy::multiscale(h, w, factors, hidden, seed, *spectral_norm)?)
            }
        };
        if model.dim() != d {
            return Err(LabError::Config(format!(
                "{}-dimensional energy for {}-dimensional data",
                model.dim(),
                d
            )));
        }
        Ok(model)
    }
}

fn default_wall_time() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Radius for mode coverage; three mode standard deviations when unset.
    #[serde(default)]
    pub coverage_radius: Option<f64>,
    /// Quadrature for the exact-gradient cosine logged every step.
    #[serde(default)]
    pub oracle: Option<Quadrature>,
    #[serde(default = "default_wall_time")]
    pub wall_time: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            coverage_radius: None,
            oracle: None,
            wall_time: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// 0 disables periodic checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub metrics_format: MetricsFormat,
}

fn default_capacity() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    #[serde(default = "default_capacity")]
    pub reservoir_capacity: usize,
    /// Refill the whole reservoir from its base distribution every this many
    /// updates. Off when unset.
    #[serde(default)]
    pub full_reset_every: Option<u64>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub dataset: DatasetSpec,
    pub energy: EnergySpec,
    pub sampler: SamplerConfig,
    pub init: InitPolicy,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if self.batch_size == 0 {
            return Err(LabError::Config("batch size must be positive".into()));
        }
        if self.reservoir_capacity == 0 {
            return Err(LabError::Config("reservoir capacity must be positive".into()));
        }
        if self.full_reset_every == Some(0) {
            return Err(LabError::Config("full_reset_every must be positive".into()));
        }
        self.optimizer.validate()?;
        self.dataset.validate()?;
        self.init.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, then applies dotted-key overrides such as
    /// `("sampler.step_size", "0.5")`.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self, LabError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, LabError> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Splits `key=value` (leading dashes allowed).
pub fn parse_override(arg: &str) -> Result<(String, String), LabError> {
    let s = arg.trim_start_matches('-');
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(LabError::Config(format!("override '{}' is not key=value", arg))),
    }
}

fn literal(raw: &str) -> toml::Value {
    match format!("v = {}", raw).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets a dotted key, creating intermediate tables. The value is read as a
/// TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), LabError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::Config(format!("bad override key '{}'", key)));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| LabError::Config(format!("'{}' in '{}' is not a table", p, key)))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), literal(raw));
    Ok(())
}
