//! Energy functions E_θ(x): analytic, tabulated and learned, plus
//! composition (sums of energies, i.e. products of experts) and spectral
//! normalization.
//!
//! Every model builds a per-row energy graph over a `[n, d]` batch, so value,
//! ∇x and ∇θ all come from [`crate::diffcore`]. Energies are not required to
//! be non-negative: only differences matter for p_θ and its gradients.

mod composite;
mod grid;
mod mixture;
mod mlp;
mod quadratic;
mod spectral;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, NodeId, ParamNodes, ParamSet, Tensor};

pub use composite::{compose, downsample, CompositeEnergy, Transform};
pub use grid::GridEnergy;
pub use mixture::{ring_modes, MixtureComponent, MixtureEnergy};
pub use mlp::MlpEnergy;
pub use quadratic::{FlatEnergy, QuadraticEnergy};
pub use spectral::{spectral_normalize, SpectralOutcome};

#[derive(Debug, thiserror::Error)]
pub enum EnergyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid energy: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box `[lo_i, hi_i]` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, EnergyError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(EnergyError::Invalid(format!(
                "box bounds of lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(EnergyError::Invalid(format!("empty or non-finite box {:?}..{:?}", lo, hi)));
        }
        Ok(Self { lo, hi })
    }

    /// The same interval on every axis.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, EnergyError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &v)| v >= self.lo[i % self.lo.len()] && v <= self.hi[i % self.hi.len()])
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }
}

/// A parameterized scalar field over R^d.
pub trait EnergyModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Current θ (possibly empty).
    fn params(&self) -> ParamSet;

    fn set_params(&mut self, params: &ParamSet) -> Result<(), EnergyError>;

    /// Per-row energies `[n]` of the `[n, dim]` batch node `x`, with θ read
    /// from `theta`.
    fn build(&self, g: &mut Graph, theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError>;

    /// Compact support, if the density lives on a box.
    fn support(&self) -> Option<BoxBounds> {
        None
    }

    /// Non-trainable persistent state (spectral-norm vectors).
    fn buffers(&self) -> ParamSet {
        ParamSet::new()
    }

    fn set_buffers(&mut self, _buffers: &ParamSet) -> Result<(), EnergyError> {
        Ok(())
    }

    /// Advances persistent estimates once; called after each optimizer step.
    fn refresh(&mut self) {}

    fn clone_box(&self) -> Box<dyn EnergyModel>;
}

impl Clone for Box<dyn EnergyModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Accepts `[d]` or `[n, d]` and returns the batch as `[n, d]`.
pub fn as_batch(model: &dyn EnergyModel, x: &Tensor) -> Result<Tensor, EnergyError> {
    let d = model.dim();
    match x.shape() {
        [k] if *k == d => Ok(x.reshape(&[1, d])?),
        [_, k] if *k == d => Ok(x.clone()),
        [k] | [_, k] => Err(EnergyError::Dimension { expected: d, got: *k }),
        other => Err(EnergyError::Invalid(format!("state shape {:?}", other))),
    }
}

/// E_θ(x) for a single state.
pub fn energy(model: &dyn EnergyModel, x: &Tensor) -> Result<f64, EnergyError> {
    if x.ndim() != 1 {
        return Err(EnergyError::Invalid(format!("expected a single state, got shape {:?}", x.shape())));
    }
    Ok(energies(model, x)?.data()[0])
}

/// Energies of every row of a batch.
pub fn energies(model: &dyn EnergyModel, batch: &Tensor) -> Result<Tensor, EnergyError> {
    let batch = as_batch(model, batch)?;
    let mut g = Graph::new();
    let theta = g.bind_constants(&model.params());
    let x = g.constant(batch);
    let e = model.build(&mut g, &theta, x)?;
    Ok(g.value(e).clone())
}

/// Per-row energies and ∇x E for a `[n, d]` batch.
pub fn energy_and_grad_x(model: &dyn EnergyModel, batch: &Tensor) -> Result<(Tensor, Tensor), EnergyError> {
    let batch = as_batch(model, batch)?;
    let mut g = Graph::new();
    let theta = g.bind_constants(&model.params());
    let x = g.input("x", batch);
    let e = model.build(&mut g, &theta, x)?;
    let total = g.sum(e)?;
    let dx = g.gradient(total, &[x])?[0];
    Ok((g.value(e).clone(), g.value(dx).clone()))
}

/// Mean energy of the batch and its gradient with respect to θ.
pub fn mean_energy_grad_theta(model: &dyn EnergyModel, batch: &Tensor) -> Result<(f64, ParamSet), EnergyError> {
    let batch = as_batch(model, batch)?;
    let params = model.params();
    let mut g = Graph::new();
    let theta = g.bind_params(&params);
    let x = g.constant(batch);
    let e = model.build(&mut g, &theta, x)?;
    let mean = g.mean(e)?;
    let value = g.value(mean).item();
    let grads = gradient_param_set(&mut g, mean, &theta, &params)?;
    Ok((value, grads))
}

/// Gradient of `root` with respect to every bound parameter, as a [`ParamSet`]
/// with the same layout as `template`.
pub fn gradient_param_set(
    g: &mut Graph,
    root: NodeId,
    theta: &ParamNodes,
    template: &ParamSet,
) -> Result<ParamSet, EnergyError> {
    let names = theta.names();
    let ids = theta.ids();
    if ids.is_empty() {
        return Ok(template.zeros_like());
    }
    let grads = g.gradient(root, &ids)?;
    let mut out = ParamSet::new();
    for (name, gid) in names.into_iter().zip(grads) {
        out.insert(name, g.value(gid).clone())?;
    }
    Ok(out)
}

/// Writes `x,y,E` rows for every node of a regular grid over `bounds`.
pub fn dump_grid_csv<W: Write>(
    model: &dyn EnergyModel,
    bounds: &BoxBounds,
    resolution: usize,
    out: W,
) -> Result<usize, EnergyError> {
    if model.dim() != 2 || bounds.dim() != 2 {
        return Err(EnergyError::Invalid("grid dump needs a 2-D model and box".into()));
    }
    if resolution < 2 {
        return Err(EnergyError::Invalid("grid dump needs at least 2 nodes per axis".into()));
    }
    let coord = |axis: usize, k: usize| {
        bounds.lo[axis] + (bounds.hi[axis] - bounds.lo[axis]) * k as f64 / (resolution - 1) as f64
    };
    let mut pts = Vec::with_capacity(resolution * resolution * 2);
    for i in 0..resolution {
        for j in 0..resolution {
            pts.push(coord(0, i));
            pts.push(coord(1, j));
        }
    }
    let batch = Tensor::matrix(resolution * resolution, 2, pts)?;
    let e = energies(model, &batch)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "E"]).map_err(csv_io)?;
    for r in 0..batch.rows_cols().0 {
        let row = batch.row(r);
        w.write_record([row[0].to_string(), row[1].to_string(), e.data()[r].to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(resolution * resolution)
}

fn csv_io(e: csv::Error) -> EnergyError {
    EnergyError::Io(std::io::Error::other(e))
}
