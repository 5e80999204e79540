use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};

use super::{EnergyError, EnergyModel, MlpEnergy};

/// Input transform applied before a component energy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Identity { dim: usize },
    /// Average-pool a flattened `height × width` raster by `factor`.
    AvgPool { height: usize, width: usize, factor: usize },
}

impl Transform {
    pub fn in_dim(&self) -> usize {
        match self {
            Transform::Identity { dim } => *dim,
            Transform::AvgPool { height, width, .. } => height * width,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Transform::Identity { dim } => *dim,
            Transform::AvgPool { height, width, factor } => (height / factor) * (width / factor),
        }
    }

    fn validate(&self) -> Result<(), EnergyError> {
        if let Transform::AvgPool { height, width, factor } = self {
            if *factor == 0 || height % factor != 0 || width % factor != 0 {
                return Err(EnergyError::Invalid(format!(
                    "{}x{} raster is not divisible by {}",
                    height, width, factor
                )));
            }
        }
        Ok(())
    }

    fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, EnergyError> {
        match self {
            Transform::Identity { .. } => Ok(x),
            Transform::AvgPool { height, width, factor } => {
                let n = g.shape(x)[0];
                let img = g.reshape(x, &[n, *height, *width])?;
                let pooled = g.avg_pool2d(img, *factor)?;
                Ok(g.reshape(pooled, &[n, (height / factor) * (width / factor)])?)
            }
        }
    }
}

/// Average-pools a `h × w` image by `factor`.
pub fn downsample(x: &Tensor, factor: usize) -> Result<Tensor, EnergyError> {
    if x.ndim() != 2 {
        return Err(EnergyError::Invalid(format!("downsample needs an h×w image, got {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let node = g.constant(x.clone());
    let out = g.avg_pool2d(node, factor)?;
    Ok(g.value(out).clone())
}

/// E(x) = Σᵢ Eᵢ(Tᵢ(x)); the density is the normalized product of the components'.
///
/// Component parameters are exposed with an `e{i}.` prefix.
#[derive(Clone, Debug)]
pub struct CompositeEnergy {
    parts: Vec<(Box<dyn EnergyModel>, Transform)>,
    dim: usize,
}

pub fn compose(models: Vec<Box<dyn EnergyModel>>, transforms: Vec<Transform>) -> Result<CompositeEnergy, EnergyError> {
    if models.is_empty() || models.len() != transforms.len() {
        return Err(EnergyError::Invalid(format!(
            "{} models for {} transforms",
            models.len(),
            transforms.len()
        )));
    }
    let dim = transforms[0].in_dim();
    for (m, t) in models.iter().zip(&transforms) {
        t.validate()?;
        if t.in_dim() != dim {
            return Err(EnergyError::Dimension {
                expected: dim,
                got: t.in_dim(),
            });
        }
        if t.out_dim() != m.dim() {
            return Err(EnergyError::Dimension {
                expected: m.dim(),
                got: t.out_dim(),
            });
        }
    }
    Ok(CompositeEnergy {
        parts: models.into_iter().zip(transforms).collect(),
        dim,
    })
}

impl CompositeEnergy {
    /// One MLP per resolution of a `height × width` raster (factor 1 = full resolution).
    pub fn multiscale(
        height: usize,
        width: usize,
        factors: &[usize],
        hidden: &[usize],
        seed: u64,
        spectral: bool,
    ) -> Result<Self, EnergyError> {
        let mut models: Vec<Box<dyn EnergyModel>> = Vec::new();
        let mut transforms = Vec::new();
        for (i, &f) in factors.iter().enumerate() {
            let t = if f == 1 {
                Transform::Identity { dim: height * width }
            } else {
                Transform::AvgPool { height, width, factor: f }
            };
            t.validate()?;
            let mut mlp = MlpEnergy::new(t.out_dim(), hidden, seed.wrapping_add(i as u64))?;
            if spectral {
                mlp = mlp.with_spectral_norm();
            }
            models.push(Box::new(mlp));
            transforms.push(t);
        }
        compose(models, transforms)
    }

    pub fn parts(&self) -> usize {
        self.parts.len()
    }
}

fn prefix(i: usize) -> String {
    format!("e{}.", i)
}

impl EnergyModel for CompositeEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, (m, _)) in self.parts.iter().enumerate() {
            p.extend(m.params().prefixed(&prefix(i))).expect("prefixes are disjoint");
        }
        p
    }

    fn set_params(&mut self, params: &ParamSet) -> Result<(), EnergyError> {
        for (i, (m, _)) in self.parts.iter_mut().enumerate() {
            m.set_params(&params.scoped(&prefix(i)))?;
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError> {
        let mut total: Option<NodeId> = None;
        for (i, (m, t)) in self.parts.iter().enumerate() {
            let xi = t.apply(g, x)?;
            let e = m.build(g, &theta.scoped(&prefix(i)), xi)?;
            total = Some(match total {
                Some(acc) => g.add(acc, e)?,
                None => e,
            });
        }
        Ok(total.expect("non-empty composite"))
    }

    fn buffers(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (i, (m, _)) in self.parts.iter().enumerate() {
            p.extend(m.buffers().prefixed(&prefix(i))).expect("prefixes are disjoint");
        }
        p
    }

    fn set_buffers(&mut self, buffers: &ParamSet) -> Result<(), EnergyError> {
        for (i, (m, _)) in self.parts.iter_mut().enumerate() {
            m.set_buffers(&buffers.scoped(&prefix(i)))?;
        }
        Ok(())
    }

    fn refresh(&mut self) {
        for (m, _) in &mut self.parts {
            m.refresh();
        }
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}
