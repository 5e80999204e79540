use std::path::Path;
use std::time::Instant;

use crate::diffcore::Tensor;
use crate::energies::EnergyModel;
use crate::objectives::{compute_gradient, exact_nll_grad, ObjectiveVariant, Provenance, SampleBank};
use crate::replay::Reservoir;
use crate::rng::{chain_streams, derive_seed, stream};
use crate::sampling::{nearest_mode, SamplerConfig, TransitionOp};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::data::Dataset;
use super::diagnostics::mode_coverage;
use super::metrics::{write_metrics, MetricsLog, MetricsRecord};
use super::optim::{adam_step, AdamState};
use super::LabError;

/// Stateful training run. Every random draw at step `s` comes from streams
/// derived from `(seed, s)`, so a run restored from a checkpoint continues
/// exactly as an uninterrupted one.
pub struct Trainer {
    config: ExperimentConfig,
    sampler: SamplerConfig,
    dataset: Dataset,
    model: Box<dyn EnergyModel>,
    adam: AdamState,
    reservoir: Option<Reservoir>,
    bank: SampleBank,
    step: u64,
    log: MetricsLog,
}

pub struct TrainOutcome {
    pub model: Box<dyn EnergyModel>,
    pub metrics: MetricsLog,
    pub reservoir: Option<Reservoir>,
    pub dataset: Dataset,
    pub sampler: SamplerConfig,
}

/// The sampler with empty mode-jump lists filled from the dataset modes.
pub fn resolve_sampler(sampler: &SamplerConfig, dataset: &Dataset) -> Result<SamplerConfig, LabError> {
    let mut s = sampler.clone();
    if let Some(aug) = &mut s.augmentation {
        if let TransitionOp::ModeJump { modes } = &mut aug.op {
            if modes.is_empty() {
                *modes = dataset
                    .modes
                    .clone()
                    .ok_or_else(|| LabError::Config("mode jumps need a dataset with known modes".into()))?;
            }
        }
    }
    s.validate(dataset.dim())?;
    Ok(s)
}

fn uses_chains(config: &ExperimentConfig) -> bool {
    !matches!(config.objective.variant, ObjectiveVariant::ExactNll { .. })
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self, LabError> {
        config.validate()?;
        let dataset = config.dataset.build(derive_seed(config.seed, "data", &[]))?;
        let model = config.energy.build(&dataset, config.seed)?;
        let sampler = resolve_sampler(&config.sampler, &dataset)?;
        config.objective.validate(model.as_ref(), &sampler)?;
        let reservoir = if uses_chains(&config) {
            let mut rng = stream(config.seed, "reservoir", &[]);
            Some(Reservoir::init(
                config.init.clone(),
                config.reservoir_capacity,
                dataset.dim(),
                Some(&dataset.points),
                &mut rng,
            )?)
        } else {
            None
        };
        let bank = SampleBank::new(config.objective.entropy_bank_size, dataset.dim());
        Ok(Self {
            adam: AdamState::new(&model.params()),
            config,
            sampler,
            dataset,
            model,
            reservoir,
            bank,
            step: 0,
            log: MetricsLog::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, LabError> {
        let mut t = Self::new(ckpt.config)?;
        t.model.set_params(&ckpt.params)?;
        t.model.set_buffers(&ckpt.buffers)?;
        t.adam = ckpt.adam;
        t.reservoir = ckpt.reservoir;
        t.bank = ckpt.bank;
        t.step = ckpt.step;
        t.log = MetricsLog::from_records(ckpt.metrics)?;
        Ok(t)
    }

    pub fn resume(path: &Path) -> Result<Self, LabError> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            params: self.model.params(),
            buffers: self.model.buffers(),
            adam: self.adam.clone(),
            reservoir: self.reservoir.clone(),
            bank: self.bank.clone(),
            metrics: self.log.records().to_vec(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &dyn EnergyModel {
        self.model.as_ref()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn sampler(&self) -> &SamplerConfig {
        &self.sampler
    }

    pub fn reservoir(&self) -> Option<&Reservoir> {
        self.reservoir.as_ref()
    }

    pub fn metrics(&self) -> &MetricsLog {
        &self.log
    }

    fn data_batch(&self, s: u64) -> Tensor {
        if self.config.batch_size == self.dataset.len() {
            self.dataset.points.clone()
        } else {
            self.dataset
                .batch(self.config.batch_size, &mut stream(self.config.seed, "batch", &[s]))
        }
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<&MetricsRecord, LabError> {
        let s = self.step;
        self.train_step_inner(s).map_err(|e| LabError::Step {
            step: s + 1,
            source: Box::new(e),
        })?;
        Ok(self.log.last().expect("record just pushed"))
    }

    fn train_step_inner(&mut self, s: u64) -> Result<(), LabError> {
        let started = Instant::now();
        let cfg = &self.config;
        let data = self.data_batch(s);
        let inits = match &self.reservoir {
            Some(res) => {
                let pool = if cfg.init.uses_data() { Some(&self.dataset.points) } else { None };
                res.sample_inits(cfg.batch_size, pool, &mut stream(cfg.seed, "inits", &[s]))?
                    .states
            }
            None => data.clone(),
        };
        let n = inits.shape()[0];
        let mut rngs = chain_streams(derive_seed(cfg.seed, "chains", &[s]), "chain", n);
        let est = compute_gradient(
            &cfg.objective,
            self.model.as_ref(),
            &data,
            &inits,
            &self.sampler,
            &mut rngs,
            &mut self.bank,
            Provenance::from_policy(&cfg.init),
        )?;
        if !est.data_energy.is_finite() {
            return Err(LabError::Config(format!("non-finite mean data energy {}", est.data_energy)));
        }
        let oracle_cosine = match &cfg.monitor.oracle {
            Some(q) => Some(est.total.cosine(&exact_nll_grad(self.model.as_ref(), &data, q)?)?),
            None => None,
        };
        let (params, adam, report) = adam_step(&self.model.params(), &est.total, &self.adam, &cfg.optimizer)?;
        self.model.set_params(&params)?;
        if !report.skipped {
            self.model.refresh();
        }
        self.adam = adam;
        let mut coverage = None;
        let mut transition_rate = None;
        if let Some(finals) = &est.finals {
            if let Some(res) = &mut self.reservoir {
                res.push_finals(finals)?;
                if cfg.full_reset_every.is_some_and(|k| (s + 1) % k == 0) {
                    let pool = if cfg.init.uses_data() { Some(&self.dataset.points) } else { None };
                    res.refill(pool, &mut stream(cfg.seed, "full-reset", &[s]))?;
                }
            }
            if let Some(modes) = &self.dataset.modes {
                let radius = cfg
                    .monitor
                    .coverage_radius
                    .or(self.dataset.mode_std.map(|s| 3.0 * s));
                coverage = radius.map(|r| mode_coverage(finals, modes, r));
                let moved = (0..n)
                    .filter(|&i| nearest_mode(inits.row(i), modes) != nearest_mode(finals.row(i), modes))
                    .count();
                transition_rate = Some(moved as f64 / n as f64);
            }
        }
        let norms = est.norms();
        let record = MetricsRecord {
            step: s + 1,
            grad_positive: norms.positive,
            grad_negative: norms.negative,
            grad_kl_entropy: norms.kl_entropy,
            grad_kl_opt: norms.kl_opt,
            grad_total: norms.total,
            grad_clipped: report.clipped_norm,
            data_energy: est.data_energy,
            sample_energy: est.finals.as_ref().map(|_| est.sample_energy),
            mode_coverage: coverage,
            transition_rate,
            acceptance: est.chain_stats.as_ref().and_then(|c| c.acceptance_rate()),
            oracle_cosine,
            skipped: report.skipped,
            wall_secs: if cfg.monitor.wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        self.log.push(record)?;
        self.step = s + 1;
        Ok(())
    }

    /// Runs `steps` more updates, writing periodic checkpoints when an
    /// output directory is configured.
    pub fn run(&mut self, steps: usize) -> Result<(), LabError> {
        for _ in 0..steps {
            self.train_step()?;
            let every = self.config.output.checkpoint_every as u64;
            if let Some(dir) = &self.config.output.dir {
                if every > 0 && self.step % every == 0 {
                    std::fs::create_dir_all(dir)?;
                    self.checkpoint().save(&dir.join(format!("checkpoint-{:08}.ebmc", self.step)))?;
                }
            }
            if self.step % 100 == 0 {
                if let Some(r) = self.log.last() {
                    log::info!(
                        "step {} data energy {:.4} grad {:.3e} coverage {:?}",
                        r.step,
                        r.data_energy,
                        r.grad_total,
                        r.mode_coverage
                    );
                }
            }
        }
        Ok(())
    }

    /// Runs until the configured step count is reached.
    pub fn run_to_end(&mut self) -> Result<(), LabError> {
        let left = (self.config.steps as u64).saturating_sub(self.step);
        self.run(left as usize)
    }

    /// Writes the metrics log and a final checkpoint to the output directory.
    pub fn write_outputs(&self) -> Result<(), LabError> {
        let Some(dir) = &self.config.output.dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let fmt = self.config.output.metrics_format;
        if !self.log.is_empty() {
            write_metrics(self.log.records(), fmt, &dir.join(format!("metrics.{}", fmt.extension())))?;
        }
        self.checkpoint().save(&dir.join("final.ebmc"))
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            metrics: self.log,
            reservoir: self.reservoir,
            dataset: self.dataset,
            sampler: self.sampler,
        }
    }
}

/// Trains for `config.steps` updates and writes outputs if configured.
pub fn train(config: ExperimentConfig) -> Result<TrainOutcome, LabError> {
    let mut t = Trainer::new(config)?;
    t.run_to_end()?;
    t.write_outputs()?;
    Ok(t.finish())
}

/// One audited update: per-phase gradient norms and the oracle cosine.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AuditRecord {
    pub step: u64,
    pub variant: String,
    pub grad_positive: f64,
    pub grad_negative: f64,
    pub grad_kl_entropy: Option<f64>,
    pub grad_kl_opt: Option<f64>,
    pub grad_total: f64,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GradAudit {
    pub variant: String,
    pub records: Vec<AuditRecord>,
    pub mean_cosine: f64,
    pub min_cosine: f64,
}

/// Trains with `quadrature` as the exact-gradient oracle and reports the
/// cosine between the estimated and exact NLL gradients at every step.
pub fn grad_audit(
    mut config: ExperimentConfig,
    quadrature: crate::objectives::Quadrature,
    steps: usize,
) -> Result<GradAudit, LabError> {
    config.monitor.oracle = Some(quadrature);
    config.steps = steps;
    let variant = config.objective.variant.name().to_string();
    let mut t = Trainer::new(config)?;
    t.run_to_end()?;
    let records: Vec<AuditRecord> = t
        .metrics()
        .records()
        .iter()
        .filter_map(|r| {
            r.oracle_cosine.map(|c| AuditRecord {
                step: r.step,
                variant: variant.clone(),
                grad_positive: r.grad_positive,
                grad_negative: r.grad_negative,
                grad_kl_entropy: r.grad_kl_entropy,
                grad_kl_opt: r.grad_kl_opt,
                grad_total: r.grad_total,
                cosine: c,
            })
        })
        .collect();
    let mean_cosine = records.iter().map(|r| r.cosine).sum::<f64>() / records.len().max(1) as f64;
    let min_cosine = records.iter().map(|r| r.cosine).fold(f64::INFINITY, f64::min);
    Ok(GradAudit {
        variant,
        records,
        mean_cosine,
        min_cosine,
    })
}
