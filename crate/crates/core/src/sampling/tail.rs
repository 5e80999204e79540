//! Chains recorded on a tape so that functions of the final state can be
//! differentiated with respect to θ, including through ∇x E.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, NodeId, ParamNodes, Tensor};
use crate::energies::{as_batch, EnergyModel};

use super::chain::{check_finite, draws, inside, log_accept_row, run_chains_from, transition_delta, ChainStats};
use super::{SamplerConfig, SamplingError};

#[derive(Clone, Debug)]
pub struct DiffChain {
    /// `[n, d]` node holding the final states.
    pub final_node: NodeId,
    /// Detached state where the recorded tail starts.
    pub start: Tensor,
    pub final_state: Tensor,
    pub stats: ChainStats,
}

/// Runs `cfg.steps` steps; the first `steps − k` detached, the last `k` on
/// the tape of `g` with energy parameters read from `theta`.
///
/// Noise is drawn from the same streams in the same order as
/// [`super::run_chains`], so the final values coincide bit for bit with an
/// ordinary run.
pub fn run_chain_differentiable(
    g: &mut Graph,
    theta: &ParamNodes,
    model: &dyn EnergyModel,
    init: &Tensor,
    cfg: &SamplerConfig,
    k: usize,
    rngs: &mut [ChaCha8Rng],
) -> Result<DiffChain, SamplingError> {
    if k > cfg.steps {
        return Err(SamplingError::Config(format!(
            "cannot record {} of {} steps",
            k, cfg.steps
        )));
    }
    let batch = as_batch(model, init)?;
    guard(&batch, cfg, k)?;
    let prefix_cfg = SamplerConfig {
        trace: false,
        ..cfg.with_steps(cfg.steps - k)
    };
    let prefix = run_chains_from(&batch, model, &prefix_cfg, rngs, 0)?;
    let mut out = differentiable_tail(g, theta, model, &prefix.final_state, cfg, k, (cfg.steps - k) as u64, rngs)?;
    out.stats.accepted = out
        .stats
        .accepted
        .iter()
        .zip(&prefix.stats.accepted)
        .map(|(a, b)| a + b)
        .collect();
    out.stats.proposed += prefix.stats.proposed;
    out.stats.transitions_applied += prefix.stats.transitions_applied;
    out.stats.transitions_accepted += prefix.stats.transitions_accepted;
    out.stats.steps = cfg.steps;
    Ok(out)
}

fn guard(batch: &Tensor, cfg: &SamplerConfig, k: usize) -> Result<(), SamplingError> {
    let (n, d) = batch.rows_cols();
    if k.saturating_mul(n).saturating_mul(d) > cfg.tape_limit {
        return Err(SamplingError::TapeLimit {
            steps: k,
            chains: n,
            dim: d,
            limit: cfg.tape_limit,
        });
    }
    Ok(())
}

/// Records `k` steps starting from the detached state `start`.
///
/// The start is an input leaf, so ∇x E is available on the tape; noise draws
/// are constants. Metropolis decisions and transitions are made on values
/// and enter as constant masks / straight-through displacements.
#[allow(clippy::too_many_arguments)]
pub fn differentiable_tail(
    g: &mut Graph,
    theta: &ParamNodes,
    model: &dyn EnergyModel,
    start: &Tensor,
    cfg: &SamplerConfig,
    k: usize,
    start_age: u64,
    rngs: &mut [ChaCha8Rng],
) -> Result<DiffChain, SamplingError> {
    let batch = as_batch(model, start)?;
    let (n, d) = batch.rows_cols();
    if rngs.len() != n {
        return Err(SamplingError::Streams {
            chains: n,
            streams: rngs.len(),
        });
    }
    cfg.validate(d)?;
    guard(&batch, cfg, k)?;
    let mut stats = ChainStats {
        accepted: vec![0; n],
        steps: k,
        ..ChainStats::default()
    };
    if k == 0 {
        let node = g.constant(batch.clone());
        return Ok(DiffChain {
            final_node: node,
            start: batch.clone(),
            final_state: batch,
            stats,
        });
    }
    let mut x = g.input("chain_start", batch.clone());
    for s in 0..k {
        let age = start_age + s as u64 + 1;
        let (ex, gx) = energy_and_grad_node(g, theta, model, x)?;
        check_finite("gradient", g.value(ex).data(), g.value(gx).data(), g.value(x).data(), d, age)?;
        if cfg.trace {
            stats.energy_trace.push(g.value(ex).sum() / n as f64);
        }
        let (xi, u) = draws(rngs, d, cfg.adjusted);
        let noise: Vec<f64> = xi.iter().map(|z| z * cfg.noise()).collect();
        let step = g.scale(gx, -0.5 * cfg.step_size)?;
        let moved = g.add(x, step)?;
        let noise = g.constant(Tensor::matrix(n, d, noise)?);
        let y = g.add(moved, noise)?;
        if cfg.adjusted {
            stats.proposed += 1;
            let (ey, gy) = energy_and_grad_node(g, theta, model, y)?;
            let mut mask = vec![0.0; n * d];
            for i in 0..n {
                let (lo, hi) = (i * d, (i + 1) * d);
                let yv = &g.value(y).data()[lo..hi];
                if !inside(yv, &cfg.clamp_box) {
                    continue;
                }
                let la = log_accept_row(
                    &g.value(x).data()[lo..hi],
                    yv,
                    g.value(ex).data()[i],
                    g.value(ey).data()[i],
                    &g.value(gx).data()[lo..hi],
                    &g.value(gy).data()[lo..hi],
                    cfg.step_size,
                );
                if la.is_nan() || la == f64::INFINITY {
                    return Err(SamplingError::NonFinite {
                        what: "acceptance ratio",
                        chain: i,
                        step: age,
                        energy: g.value(ey).data()[i],
                        position: yv.to_vec(),
                    });
                }
                if u[i].ln() < la {
                    stats.accepted[i] += 1;
                    mask[lo..hi].iter_mut().for_each(|m| *m = 1.0);
                }
            }
            let keep: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
            let mask = g.constant(Tensor::matrix(n, d, mask)?);
            let keep = g.constant(Tensor::matrix(n, d, keep)?);
            let take = g.mul(mask, y)?;
            let stay = g.mul(keep, x)?;
            x = g.add(take, stay)?;
        } else {
            x = match &cfg.clamp_box {
                Some(b) => g.clamp(y, &b.lo, &b.hi)?,
                None => y,
            };
        }
        let current = g.value(x).clone();
        if let Some(delta) = transition_delta(model, &current, cfg, rngs, age, &mut stats)? {
            let delta = g.constant(Tensor::matrix(n, d, delta)?);
            x = g.add(x, delta)?;
        }
    }
    let final_state = g.value(x).clone();
    stats.final_energies = crate::energies::energies(model, &final_state)?.into_data();
    Ok(DiffChain {
        final_node: x,
        start: batch,
        final_state,
        stats,
    })
}

/// Per-row energies and ∇x E as nodes; the gradient stays differentiable in θ.
fn energy_and_grad_node(
    g: &mut Graph,
    theta: &ParamNodes,
    model: &dyn EnergyModel,
    x: NodeId,
) -> Result<(NodeId, NodeId), SamplingError> {
    let e = model.build(g, theta, x)?;
    let total = g.sum(e)?;
    let grad = g.gradient(total, &[x])?[0];
    Ok((e, grad))
}
