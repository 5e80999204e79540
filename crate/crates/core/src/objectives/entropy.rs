//! Nearest-neighbour entropy terms.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;

use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};
use crate::energies::{gradient_param_set, EnergyModel};

use super::ObjectiveError;

/// Floor ε inside the log of a nearest-neighbour distance.
pub const NN_FLOOR: f64 = 1e-8;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// (1/n) Σᵢ log(n · NNᵢ), NNᵢ the Euclidean distance from xᵢ to its nearest
/// other sample. The θ-independent constant is left out; see
/// [`knn_entropy_constant`].
pub fn knn_entropy(samples: &Tensor) -> Result<f64, ObjectiveError> {
    let (n, d) = match samples.shape() {
        [n, d] => (*n, *d),
        [n] => (*n, 1),
        other => return Err(ObjectiveError::Invalid(format!("samples of shape {:?}", other))),
    };
    if n < 2 {
        return Err(ObjectiveError::Invalid("entropy estimate needs at least two samples".into()));
    }
    let data = samples.data();
    let nn: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &data[i * d..(i + 1) * d];
            (0..n)
                .filter(|&j| j != i)
                .map(|j| sq_dist(xi, &data[j * d..(j + 1) * d]))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    if let Some(i) = nn.iter().position(|&r| r == 0.0) {
        return Err(ObjectiveError::DuplicateSample { index: i });
    }
    let nf = n as f64;
    Ok(nn.iter().map(|r| (nf * r).ln()).sum::<f64>() / nf)
}

fn gamma_half_integer(twice: usize) -> f64 {
    // Γ(twice / 2) for twice >= 1
    let mut v = if twice % 2 == 0 { 1.0 } else { std::f64::consts::PI.sqrt() };
    let mut k = if twice % 2 == 0 { 2 } else { 1 };
    while k < twice {
        v *= k as f64 / 2.0;
        k += 2;
    }
    v
}

/// Asymptotic constant γ + log V_d dropped by [`knn_entropy`] (V_d is the
/// volume of the unit d-ball).
pub fn knn_entropy_constant(d: usize) -> f64 {
    let vd = std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_half_integer(d + 2);
    EULER_GAMMA + vd.ln()
}

/// Offset to add to [`knn_entropy`], measured on U[0,1]^d samples (whose
/// entropy is 0), averaged over `repeats` draws of `n` points.
pub fn calibrate_entropy_offset<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<f64, ObjectiveError> {
    let mut acc = 0.0;
    for _ in 0..repeats.max(1) {
        let pts: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        acc += knn_entropy(&Tensor::matrix(n, d, pts)?)?;
    }
    Ok(-acc / repeats.max(1) as f64)
}

/// Bounded FIFO of recent negative samples.
#[derive(Clone, Debug)]
pub struct SampleBank {
    capacity: usize,
    dim: usize,
    storage: VecDeque<Vec<f64>>,
}

impl SampleBank {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            dim,
            storage: VecDeque::new(),
        }
    }

    pub fn push(&mut self, states: &Tensor) -> Result<(), ObjectiveError> {
        if states.is_empty() {
            return Ok(());
        }
        if states.shape().last() != Some(&self.dim) {
            return Err(ObjectiveError::Invalid(format!(
                "bank holds {}-dimensional samples, got shape {:?}",
                self.dim,
                states.shape()
            )));
        }
        for row in states.data().chunks(self.dim) {
            if self.storage.len() == self.capacity {
                self.storage.pop_front();
            }
            self.storage.push_back(row.to_vec());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `[len, dim]`, oldest first.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.storage.iter().flatten().copied().collect();
        Tensor::from_parts(vec![self.storage.len(), self.dim], data)
    }
}

/// −mean log NN(x, B) as a node, with NN(x, B) = √(‖x − b*‖² + ε²) and b* the
/// nearest bank entry (chosen on values; bank entries are constants).
pub fn entropy_repel_loss(g: &mut Graph, samples: NodeId, bank: &SampleBank) -> Result<NodeId, ObjectiveError> {
    if bank.is_empty() {
        return Err(ObjectiveError::EmptyBank);
    }
    let shape = g.shape(samples).to_vec();
    let (n, d) = match shape.as_slice() {
        [n, d] => (*n, *d),
        other => return Err(ObjectiveError::Invalid(format!("samples of shape {:?}", other))),
    };
    if d != bank.dim() {
        return Err(ObjectiveError::Invalid(format!("{}-dimensional samples for a {}-dimensional bank", d, bank.dim())));
    }
    let b = bank.to_tensor();
    let xv = g.value(samples).clone();
    let mut nearest = Vec::with_capacity(n * d);
    for i in 0..n {
        let xi = xv.row(i);
        let mut best = (0, f64::INFINITY);
        for j in 0..bank.len() {
            let s = sq_dist(xi, b.row(j));
            if s < best.1 {
                best = (j, s);
            }
        }
        nearest.extend_from_slice(b.row(best.0));
    }
    let nearest = g.constant(Tensor::matrix(n, d, nearest)?);
    let diff = g.sub(samples, nearest)?;
    let sq = g.square(diff)?;
    let rows = g.sum_rows(sq)?;
    let floored = g.add_scalar(rows, NN_FLOOR * NN_FLOOR)?;
    let logs = g.log(floored)?;
    let mean = g.mean(logs)?;
    Ok(g.scale(mean, -0.5)?)
}

/// ∇θ of [`entropy_repel_loss`]: pushes samples (through the chain) away
/// from their nearest bank entries.
pub fn entropy_repel_grad(
    g: &mut Graph,
    theta: &ParamNodes,
    template: &ParamSet,
    samples: NodeId,
    bank: &SampleBank,
) -> Result<ParamSet, ObjectiveError> {
    let root = entropy_repel_loss(g, samples, bank)?;
    Ok(gradient_param_set(g, root, theta, template)?)
}

/// −mean E_{Ω(θ)}(x): energy parameters frozen, dependence through the
/// chain states kept.
pub fn kl_opt_loss(
    g: &mut Graph,
    theta: &ParamNodes,
    model: &dyn EnergyModel,
    samples: NodeId,
) -> Result<NodeId, ObjectiveError> {
    let frozen = theta.frozen(g);
    let e = model.build(g, &frozen, samples)?;
    let mean = g.mean(e)?;
    Ok(g.neg(mean)?)
}

pub fn kl_opt_grad(
    g: &mut Graph,
    theta: &ParamNodes,
    template: &ParamSet,
    model: &dyn EnergyModel,
    samples: NodeId,
) -> Result<ParamSet, ObjectiveError> {
    let root = kl_opt_loss(g, theta, model, samples)?;
    Ok(gradient_param_set(g, root, theta, template)?)
}
