use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};

use super::{EnergyError, EnergyModel};

/// E(x) = ½ (x − μ)ᵀ P (x − μ) + c, so p_θ = N(μ, P⁻¹) exactly.
///
/// The mean μ is the trainable parameter `"mean"`; the precision P and the
/// offset c are fixed.
#[derive(Clone, Debug)]
pub struct QuadraticEnergy {
    mean: Vec<f64>,
    precision: Vec<f64>,
    offset: f64,
}

/// Lower-triangular Cholesky factor of a row-major SPD matrix.
pub(crate) fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

impl QuadraticEnergy {
    /// `precision` is row-major `d × d`, symmetric positive definite.
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self, EnergyError> {
        let d = mean.len();
        if d == 0 || precision.len() != d * d {
            return Err(EnergyError::Invalid(format!(
                "precision needs {} entries for dimension {}, got {}",
                d * d,
                d,
                precision.len()
            )));
        }
        for i in 0..d {
            for j in 0..i {
                if (precision[i * d + j] - precision[j * d + i]).abs() > 1e-12 {
                    return Err(EnergyError::Invalid("precision is not symmetric".into()));
                }
            }
        }
        if cholesky(&precision, d).is_none() {
            return Err(EnergyError::Invalid("precision is not positive definite".into()));
        }
        Ok(Self {
            mean,
            precision,
            offset: 0.0,
        })
    }

    /// Precision `p · I`.
    pub fn isotropic(mean: Vec<f64>, p: f64) -> Result<Self, EnergyError> {
        let d = mean.len();
        let mut precision = vec![0.0; d * d];
        for i in 0..d {
            precision[i * d + i] = p;
        }
        Self::new(mean, precision)
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// log Z = (d/2) log 2π − ½ log det P − c.
    pub fn log_partition(&self) -> f64 {
        let d = self.mean.len();
        let l = cholesky(&self.precision, d).expect("validated at construction");
        let log_det: f64 = (0..d).map(|i| 2.0 * l[i * d + i].ln()).sum();
        0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - self.offset
    }
}

impl EnergyModel for QuadraticEnergy {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("mean", Tensor::vector(self.mean.clone())).expect("fresh set");
        p
    }

    fn set_params(&mut self, params: &ParamSet) -> Result<(), EnergyError> {
        let m = params.get("mean")?;
        if m.len() != self.mean.len() {
            return Err(EnergyError::Dimension {
                expected: self.mean.len(),
                got: m.len(),
            });
        }
        self.mean = m.data().to_vec();
        Ok(())
    }

    fn build(&self, g: &mut Graph, theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError> {
        let d = self.dim();
        let mean = theta.get("mean")?;
        let diff = g.sub(x, mean)?;
        let p = g.constant(Tensor::matrix(d, d, self.precision.clone())?);
        let pd = g.matmul(diff, p)?;
        let quad = g.mul(diff, pd)?;
        let rows = g.sum_rows(quad)?;
        let half = g.scale(rows, 0.5)?;
        if self.offset == 0.0 {
            Ok(half)
        } else {
            Ok(g.add_scalar(half, self.offset)?)
        }
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}

/// A constant energy: the flat landscape. Useful as a sampler baseline.
#[derive(Clone, Debug)]
pub struct FlatEnergy {
    dim: usize,
    level: f64,
}

impl FlatEnergy {
    pub fn new(dim: usize, level: f64) -> Self {
        Self { dim, level }
    }
}

impl EnergyModel for FlatEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> ParamSet {
        ParamSet::new()
    }

    fn set_params(&mut self, _params: &ParamSet) -> Result<(), EnergyError> {
        Ok(())
    }

    fn build(&self, g: &mut Graph, _theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError> {
        // 0·x keeps the result attached to x so ∇x is a (zero) tensor of the right shape.
        let zero = g.scale(x, 0.0)?;
        let rows = g.sum_rows(zero)?;
        Ok(g.add_scalar(rows, self.level)?)
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}
