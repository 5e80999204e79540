use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffcore::Tensor;
use crate::energies::{as_batch, energies, energy_and_grad_x, BoxBounds, EnergyModel};

use super::transition::apply_transition;
use super::{SamplerConfig, SamplingError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainStats {
    pub steps: usize,
    /// Metropolis proposals per chain (adjusted sampler only).
    pub proposed: u64,
    /// Accepted proposals, per chain.
    pub accepted: Vec<u64>,
    pub transitions_applied: u64,
    pub transitions_accepted: u64,
    /// Mean energy over the batch at the start of every step (trace mode).
    pub energy_trace: Vec<f64>,
    /// Per-chain energies of the final states.
    pub final_energies: Vec<f64>,
}

impl ChainStats {
    fn new(n: usize) -> Self {
        Self {
            accepted: vec![0; n],
            ..Self::default()
        }
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        if self.proposed == 0 || self.accepted.is_empty() {
            return None;
        }
        let total: u64 = self.accepted.iter().sum();
        Some(total as f64 / (self.proposed as f64 * self.accepted.len() as f64))
    }

    pub fn mean_energy(&self) -> f64 {
        if self.final_energies.is_empty() {
            return f64::NAN;
        }
        self.final_energies.iter().sum::<f64>() / self.final_energies.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct ChainRun {
    /// `[n, d]`
    pub final_state: Tensor,
    /// States after every step (trace mode), each `[n, d]`.
    pub trajectory: Vec<Tensor>,
    pub stats: ChainStats,
}

/// Per-chain Gaussian draws (`n·d`, row-major) followed by one uniform per
/// chain when `with_uniform`.
pub(crate) fn draws(rngs: &mut [ChaCha8Rng], d: usize, with_uniform: bool) -> (Vec<f64>, Vec<f64>) {
    let mut xi = Vec::with_capacity(rngs.len() * d);
    let mut u = Vec::with_capacity(rngs.len());
    for rng in rngs.iter_mut() {
        for _ in 0..d {
            xi.push(rng.sample::<f64, _>(StandardNormal));
        }
        if with_uniform {
            u.push(rng.random::<f64>());
        }
    }
    (xi, u)
}

/// `x + ∇E·(−λ/2) + noise`, evaluated in the same order as the graph ops.
pub(crate) fn propose(x: &[f64], grad: &[f64], noise: &[f64], step_size: f64) -> Vec<f64> {
    let c = -0.5 * step_size;
    x.iter()
        .zip(grad)
        .zip(noise)
        .map(|((&x, &g), &w)| (x + g * c) + w)
        .collect()
}

pub(crate) fn clamp_values(v: &mut [f64], b: &BoxBounds) {
    let period = b.lo.len();
    for (i, x) in v.iter_mut().enumerate() {
        *x = x.max(b.lo[i % period]).min(b.hi[i % period]);
    }
}

pub(crate) fn inside(row: &[f64], b: &Option<BoxBounds>) -> bool {
    b.as_ref().is_none_or(|b| b.contains(row))
}

/// log of the Metropolis–Hastings ratio for a Langevin proposal x → y.
pub(crate) fn log_accept_row(x: &[f64], y: &[f64], ex: f64, ey: f64, gx: &[f64], gy: &[f64], step_size: f64) -> f64 {
    let c = -0.5 * step_size;
    let mut fwd = 0.0;
    let mut rev = 0.0;
    for j in 0..x.len() {
        let mx = x[j] + gx[j] * c;
        let my = y[j] + gy[j] * c;
        fwd += (y[j] - mx) * (y[j] - mx);
        rev += (x[j] - my) * (x[j] - my);
    }
    (ex - ey) + (fwd - rev) / (2.0 * step_size)
}

pub(crate) fn check_finite(
    what: &'static str,
    e: &[f64],
    grad: &[f64],
    x: &[f64],
    d: usize,
    step: u64,
) -> Result<(), SamplingError> {
    for i in 0..e.len() {
        let gi = &grad[i * d..(i + 1) * d];
        if !e[i].is_finite() || gi.iter().any(|v| !v.is_finite()) {
            return Err(SamplingError::NonFinite {
                what,
                chain: i,
                step,
                energy: e[i],
                position: x[i * d..(i + 1) * d].to_vec(),
            });
        }
    }
    Ok(())
}

/// Per-chain displacement produced by the configured transition at this age
/// (zero rows where no move happens or the Metropolis test rejects).
pub(crate) fn transition_delta(
    model: &dyn EnergyModel,
    x: &Tensor,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
    age: u64,
    stats: &mut ChainStats,
) -> Result<Option<Vec<f64>>, SamplingError> {
    let Some(aug) = &cfg.augmentation else {
        return Ok(None);
    };
    if age % aug.period as u64 != 0 {
        return Ok(None);
    }
    let (n, d) = x.rows_cols();
    let mut moved = Vec::with_capacity(n * d);
    let mut uniforms = Vec::with_capacity(n);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let mut y = apply_transition(x.row(i), &aug.op, rng)?;
        if !aug.metropolis {
            if let Some(b) = &cfg.clamp_box {
                clamp_values(&mut y, b);
            }
        } else {
            uniforms.push(rng.random::<f64>());
        }
        moved.extend(y);
    }
    let mut keep = vec![true; n];
    if aug.metropolis {
        let proposal = Tensor::matrix(n, d, moved.clone())?;
        let ex = energies(model, x)?;
        let ey = energies(model, &proposal)?;
        for i in 0..n {
            let ok = inside(proposal.row(i), &cfg.clamp_box);
            keep[i] = ok && uniforms[i].ln() < ex.data()[i] - ey.data()[i];
        }
    }
    let mut delta = vec![0.0; n * d];
    for i in 0..n {
        stats.transitions_applied += 1;
        if keep[i] {
            stats.transitions_accepted += 1;
            for j in 0..d {
                delta[i * d + j] = moved[i * d + j] - x.data()[i * d + j];
            }
        }
    }
    Ok(Some(delta))
}

pub(crate) fn add_delta(x: &Tensor, delta: &[f64]) -> Tensor {
    let data = x.data().iter().zip(delta).map(|(a, b)| a + b).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

/// Runs `cfg.steps` steps on every row of `init`, one generator per row.
pub fn run_chains(
    init: &Tensor,
    model: &dyn EnergyModel,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<ChainRun, SamplingError> {
    run_chains_from(init, model, cfg, rngs, 0)
}

/// As [`run_chains`], for chains that have already taken `start_age` steps
/// (transitions fire on absolute step counts).
pub fn run_chains_from(
    init: &Tensor,
    model: &dyn EnergyModel,
    cfg: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
    start_age: u64,
) -> Result<ChainRun, SamplingError> {
    let mut x = as_batch(model, init)?;
    let (n, d) = x.rows_cols();
    if rngs.len() != n {
        return Err(SamplingError::Streams {
            chains: n,
            streams: rngs.len(),
        });
    }
    cfg.validate(d)?;
    let mut stats = ChainStats::new(n);
    let mut trajectory = Vec::new();
    let mut cached: Option<(Tensor, Tensor)> = None;
    for s in 0..cfg.steps {
        let age = start_age + s as u64 + 1;
        let (ex, gx) = match cached.take() {
            Some(v) => v,
            None => {
                let (e, g) = energy_and_grad_x(model, &x)?;
                check_finite("gradient", e.data(), g.data(), x.data(), d, age)?;
                (e, g)
            }
        };
        if cfg.trace {
            stats.energy_trace.push(ex.sum() / n as f64);
        }
        let (xi, u) = draws(rngs, d, cfg.adjusted);
        let noise: Vec<f64> = xi.iter().map(|z| z * cfg.noise()).collect();
        let mut y = propose(x.data(), gx.data(), &noise, cfg.step_size);
        if cfg.adjusted {
            let yt = Tensor::from_parts(vec![n, d], y);
            let (ey, gy) = energy_and_grad_x(model, &yt)?;
            let mut next = x.data().to_vec();
            let mut ne = ex.data().to_vec();
            let mut ng = gx.data().to_vec();
            stats.proposed += 1;
            for i in 0..n {
                let (lo, hi) = (i * d, (i + 1) * d);
                if !inside(yt.row(i), &cfg.clamp_box) {
                    continue;
                }
                let la = log_accept_row(
                    x.row(i),
                    yt.row(i),
                    ex.data()[i],
                    ey.data()[i],
                    &gx.data()[lo..hi],
                    &gy.data()[lo..hi],
                    cfg.step_size,
                );
                if la.is_nan() || la == f64::INFINITY {
                    return Err(SamplingError::NonFinite {
                        what: "acceptance ratio",
                        chain: i,
                        step: age,
                        energy: ey.data()[i],
                        position: yt.row(i).to_vec(),
                    });
                }
                if u[i].ln() < la {
                    stats.accepted[i] += 1;
                    next[lo..hi].copy_from_slice(yt.row(i));
                    ne[i] = ey.data()[i];
                    ng[lo..hi].copy_from_slice(&gy.data()[lo..hi]);
                }
            }
            x = Tensor::from_parts(vec![n, d], next);
            cached = Some((Tensor::from_parts(vec![n], ne), Tensor::from_parts(vec![n, d], ng)));
        } else {
            if let Some(b) = &cfg.clamp_box {
                clamp_values(&mut y, b);
            }
            x = Tensor::from_parts(vec![n, d], y);
        }
        if let Some(delta) = transition_delta(model, &x, cfg, rngs, age, &mut stats)? {
            x = add_delta(&x, &delta);
            cached = None;
        }
        if cfg.trace {
            trajectory.push(x.clone());
        }
    }
    if !x.all_finite() {
        let i = (0..n).find(|&i| x.row(i).iter().any(|v| !v.is_finite())).unwrap_or(0);
        return Err(SamplingError::NonFinite {
            what: "state",
            chain: i,
            step: start_age + cfg.steps as u64,
            energy: f64::NAN,
            position: x.row(i).to_vec(),
        });
    }
    stats.steps = cfg.steps;
    stats.final_energies = energies(model, &x)?.into_data();
    Ok(ChainRun {
        final_state: x,
        trajectory,
        stats,
    })
}

/// Serial batch with one `ChaCha8Rng::seed_from_u64(seed)` per row.
pub fn run_chains_seeded(
    init: &Tensor,
    model: &dyn EnergyModel,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<ChainRun, SamplingError> {
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    run_chains(init, model, cfg, &mut rngs)
}

/// Same chains as [`run_chains_seeded`], one rayon task per row. Finals and
/// per-chain statistics are identical; the energy trace is the mean of the
/// per-chain traces.
pub fn run_chains_parallel(
    init: &Tensor,
    model: &dyn EnergyModel,
    cfg: &SamplerConfig,
    seeds: &[u64],
) -> Result<ChainRun, SamplingError> {
    let batch = as_batch(model, init)?;
    let (n, d) = batch.rows_cols();
    if seeds.len() != n {
        return Err(SamplingError::Streams {
            chains: n,
            streams: seeds.len(),
        });
    }
    let runs: Vec<ChainRun> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = Tensor::from_parts(vec![1, d], batch.row(i).to_vec());
            run_chains_seeded(&row, model, cfg, &seeds[i..i + 1])
        })
        .collect::<Result<_, _>>()?;
    let rows: Vec<Tensor> = runs.iter().map(|r| r.final_state.reshape(&[d]).expect("one row")).collect();
    let final_state = Tensor::stack_rows(&rows)?;
    let steps = runs.first().map_or(0, |r| r.trajectory.len());
    let mut trajectory = Vec::with_capacity(steps);
    for s in 0..steps {
        let rows: Vec<Tensor> = runs
            .iter()
            .map(|r| r.trajectory[s].reshape(&[d]).expect("one row"))
            .collect();
        trajectory.push(Tensor::stack_rows(&rows)?);
    }
    let mut stats = ChainStats::new(0);
    stats.steps = cfg.steps;
    stats.proposed = runs.first().map_or(0, |r| r.stats.proposed);
    let trace_len = runs.first().map_or(0, |r| r.stats.energy_trace.len());
    stats.energy_trace = (0..trace_len)
        .map(|s| runs.iter().map(|r| r.stats.energy_trace[s]).sum::<f64>() / n as f64)
        .collect();
    for r in &runs {
        stats.accepted.extend(&r.stats.accepted);
        stats.final_energies.extend(&r.stats.final_energies);
        stats.transitions_applied += r.stats.transitions_applied;
        stats.transitions_accepted += r.stats.transitions_accepted;
    }
    Ok(ChainRun {
        final_state,
        trajectory,
        stats,
    })
}

fn single(model: &dyn EnergyModel, x: &Tensor) -> Result<Tensor, SamplingError> {
    if x.ndim() != 1 {
        return Err(SamplingError::Config(format!("expected a single state, got shape {:?}", x.shape())));
    }
    Ok(as_batch(model, x)?)
}

/// One unadjusted step x' = x − (λ/2)∇E(x) + ω, ω ~ N(0, σ²I), clamped to
/// `clamp` when given.
pub fn langevin_step(
    x: &Tensor,
    model: &dyn EnergyModel,
    step_size: f64,
    noise_std: f64,
    clamp: Option<&BoxBounds>,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor, SamplingError> {
    let batch = single(model, x)?;
    let cfg = SamplerConfig {
        clamp_box: clamp.cloned(),
        ..SamplerConfig::new(step_size, noise_std, 1)
    };
    let run = run_chains(&batch, model, &cfg, std::slice::from_mut(rng))?;
    Ok(run.final_state.reshape(x.shape())?)
}

/// One Metropolis-adjusted step with proposal std √λ. Proposals leaving
/// `clamp` are rejected.
pub fn mala_step(
    x: &Tensor,
    model: &dyn EnergyModel,
    step_size: f64,
    clamp: Option<&BoxBounds>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, bool), SamplingError> {
    let batch = single(model, x)?;
    let cfg = SamplerConfig {
        clamp_box: clamp.cloned(),
        ..SamplerConfig::mala(step_size, 1)
    };
    let run = run_chains(&batch, model, &cfg, std::slice::from_mut(rng))?;
    Ok((run.final_state.reshape(x.shape())?, run.stats.accepted[0] == 1))
}

/// log min-free Metropolis–Hastings ratio log[e^{−E(y)} q(x|y) / (e^{−E(x)} q(y|x))]
/// for the Langevin proposal with step `step_size`.
pub fn mala_log_acceptance(
    model: &dyn EnergyModel,
    x: &Tensor,
    y: &Tensor,
    step_size: f64,
) -> Result<f64, SamplingError> {
    let xb = single(model, x)?;
    let yb = single(model, y)?;
    let (ex, gx) = energy_and_grad_x(model, &xb)?;
    let (ey, gy) = energy_and_grad_x(model, &yb)?;
    let la = log_accept_row(
        xb.data(),
        yb.data(),
        ex.data()[0],
        ey.data()[0],
        gx.data(),
        gy.data(),
        step_size,
    );
    if la.is_nan() {
        return Err(SamplingError::NonFinite {
            what: "acceptance ratio",
            chain: 0,
            step: 0,
            energy: ey.data()[0],
            position: yb.data().to_vec(),
        });
    }
    Ok(la)
}

/// A single chain with its own generator.
#[derive(Clone, Debug)]
pub struct Chain {
    pub state: Tensor,
    pub age: u64,
    pub accept_count: u64,
    pub stream: u64,
    rng: ChaCha8Rng,
}

impl Chain {
    pub fn new(state: Tensor, stream: u64) -> Self {
        Self {
            state,
            age: 0,
            accept_count: 0,
            stream,
            rng: ChaCha8Rng::seed_from_u64(stream),
        }
    }

    /// Takes `cfg.steps` steps from the current state.
    pub fn advance(&mut self, model: &dyn EnergyModel, cfg: &SamplerConfig) -> Result<ChainRun, SamplingError> {
        let batch = single(model, &self.state)?;
        let run = run_chains_from(&batch, model, cfg, std::slice::from_mut(&mut self.rng), self.age)?;
        self.state = run.final_state.reshape(self.state.shape())?;
        self.age += cfg.steps as u64;
        self.accept_count += run.stats.accepted[0];
        Ok(run)
    }
}
