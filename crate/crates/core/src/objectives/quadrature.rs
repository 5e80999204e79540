use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};
use crate::energies::{gradient_param_set, BoxBounds, EnergyModel};

use super::{positive_phase_grad, ObjectiveError};

fn default_tail() -> f64 {
    1e-6
}

/// Tensor-product trapezoid rule over a box with `nodes` points per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadrature {
    pub bounds: BoxBounds,
    pub nodes: usize,
    /// Largest fraction of the mass allowed on the outermost ring of nodes.
    #[serde(default = "default_tail")]
    pub tail_tolerance: f64,
}

impl Quadrature {
    pub fn new(bounds: BoxBounds, nodes: usize) -> Self {
        Self {
            bounds,
            nodes,
            tail_tolerance: default_tail(),
        }
    }

    fn validate(&self, model: &dyn EnergyModel) -> Result<(), ObjectiveError> {
        let d = self.bounds.dim();
        if d != model.dim() {
            return Err(ObjectiveError::Invalid(format!(
                "{}-dimensional quadrature for a {}-dimensional model",
                d,
                model.dim()
            )));
        }
        if d > 2 {
            return Err(ObjectiveError::Invalid("exact quadrature is limited to d <= 2".into()));
        }
        if self.nodes < 2 {
            return Err(ObjectiveError::Invalid("quadrature needs at least 2 nodes per axis".into()));
        }
        Ok(())
    }

    /// Node coordinates `[N, d]`, log trapezoid weights, and a flag per node
    /// marking the outermost ring.
    pub fn grid(&self) -> (Tensor, Vec<f64>, Vec<bool>) {
        let d = self.bounds.dim();
        let m = self.nodes;
        let axis: Vec<(Vec<f64>, Vec<f64>)> = (0..d)
            .map(|a| {
                let (lo, hi) = (self.bounds.lo[a], self.bounds.hi[a]);
                let h = (hi - lo) / (m - 1) as f64;
                let x = (0..m).map(|k| lo + h * k as f64).collect();
                let w = (0..m).map(|k| if k == 0 || k == m - 1 { 0.5 * h } else { h }).collect();
                (x, w)
            })
            .collect();
        let total = m.pow(d as u32);
        let mut pts = Vec::with_capacity(total * d);
        let mut logw = Vec::with_capacity(total);
        let mut edge = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rest = flat;
            let mut idx = vec![0; d];
            for a in (0..d).rev() {
                idx[a] = rest % m;
                rest /= m;
            }
            let mut lw = 0.0;
            for a in 0..d {
                pts.push(axis[a].0[idx[a]]);
                lw += axis[a].1[idx[a]].ln();
            }
            logw.push(lw);
            edge.push(idx.iter().any(|&k| k == 0 || k == m - 1));
        }
        (Tensor::from_parts(vec![total, d], pts), logw, edge)
    }
}

/// log Z as a graph node (log-sum-exp over log-weighted node energies).
fn log_partition_node(
    g: &mut Graph,
    theta: &ParamNodes,
    model: &dyn EnergyModel,
    quad: &Quadrature,
) -> Result<NodeId, ObjectiveError> {
    quad.validate(model)?;
    let (pts, logw, edge) = quad.grid();
    let x = g.constant(pts);
    let e = model.build(g, theta, x)?;
    let lw = g.constant(Tensor::vector(logw));
    let t = g.sub(lw, e)?;
    let tv = g.value(t).data().to_vec();
    if tv.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(ObjectiveError::Invalid("non-finite energy on the quadrature grid".into()));
    }
    let shift = tv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if model.support().is_none() {
        let mut total = 0.0;
        let mut ring = 0.0;
        for (v, &on_edge) in tv.iter().zip(&edge) {
            let w = (v - shift).exp();
            total += w;
            if on_edge {
                ring += w;
            }
        }
        if ring / total >= quad.tail_tolerance {
            return Err(ObjectiveError::TailMass {
                fraction: ring / total,
                tolerance: quad.tail_tolerance,
            });
        }
    }
    let centered = g.add_scalar(t, -shift)?;
    let w = g.exp(centered)?;
    let s = g.sum(w)?;
    let l = g.log(s)?;
    Ok(g.add_scalar(l, shift)?)
}

/// log ∫ e^{−E(x)} dx by the trapezoid rule.
pub fn exact_log_partition(model: &dyn EnergyModel, quad: &Quadrature) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let theta = g.bind_constants(&model.params());
    let l = log_partition_node(&mut g, &theta, model, quad)?;
    Ok(g.value(l).item())
}

/// (log Z, ∇θ log Z). The gradient equals −E_{p_θ}[∇θ E].
pub fn exact_log_partition_grad(model: &dyn EnergyModel, quad: &Quadrature) -> Result<(f64, ParamSet), ObjectiveError> {
    let params = model.params();
    let mut g = Graph::new();
    let theta = g.bind_params(&params);
    let l = log_partition_node(&mut g, &theta, model, quad)?;
    let value = g.value(l).item();
    let grad = gradient_param_set(&mut g, l, &theta, &params)?;
    Ok((value, grad))
}

/// Mean data energy plus log Z.
pub fn exact_nll(model: &dyn EnergyModel, data: &Tensor, quad: &Quadrature) -> Result<f64, ObjectiveError> {
    let e = crate::energies::energies(model, data)?;
    Ok(e.sum() / e.len() as f64 + exact_log_partition(model, quad)?)
}

/// E_data[∇θE] − E_{p_θ}[∇θE], with the model expectation by quadrature.
pub fn exact_nll_grad(model: &dyn EnergyModel, data: &Tensor, quad: &Quadrature) -> Result<ParamSet, ObjectiveError> {
    let pos = positive_phase_grad(model, data)?;
    let (_, neg) = exact_log_partition_grad(model, quad)?;
    Ok(pos.add(&neg)?)
}
