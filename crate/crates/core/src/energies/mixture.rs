use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};

use super::{EnergyError, EnergyModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// E(x) = −log Σₖ wₖ N(x; μₖ, σₖ² I). Normalized by construction (log Z = 0).
#[derive(Clone, Debug)]
pub struct MixtureEnergy {
    components: Vec<MixtureComponent>,
    dim: usize,
}

impl MixtureEnergy {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self, EnergyError> {
        let Some(first) = components.first() else {
            return Err(EnergyError::Invalid("mixture needs at least one component".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(EnergyError::Invalid("mixture components need a non-empty mean".into()));
        }
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim {
                return Err(EnergyError::Dimension {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if !(c.weight > 0.0) || !(c.std > 0.0) {
                return Err(EnergyError::Invalid(format!(
                    "component weight {} and std {} must be positive",
                    c.weight, c.std
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(EnergyError::Invalid(format!("mixture weights sum to {}", total)));
        }
        Ok(Self { components, dim })
    }

    /// `k` equal-weight isotropic modes evenly spaced on a circle of `radius`.
    pub fn ring(k: usize, radius: f64, std: f64) -> Result<Self, EnergyError> {
        let comps = ring_modes(k, radius)
            .into_iter()
            .map(|mean| MixtureComponent {
                weight: 1.0 / k as f64,
                mean,
                std,
            })
            .collect();
        Self::new(comps)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn modes(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Density at `x`, computed directly (test oracle path, no graph).
    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.dim as f64;
        self.components
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.weight * (-0.5 * sq / (c.std * c.std)).exp() / (2.0 * PI * c.std * c.std).powf(d / 2.0)
            })
            .sum()
    }
}

/// Points evenly spaced on a circle, starting on the positive x axis.
pub fn ring_modes(k: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / k as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

impl EnergyModel for MixtureEnergy {
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
        let n = g.shape(x)[0];
        let d = self.dim;
        // log-density of each component per row: [n, K]
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let mu = g.constant(Tensor::vector(c.mean.clone()));
            let diff = g.sub(x, mu)?;
            let sq = g.square(diff)?;
            let rows = g.sum_rows(sq)?;
            let scaled = g.scale(rows, -0.5 / (c.std * c.std))?;
            let log_norm = c.weight.ln() - 0.5 * d as f64 * (2.0 * PI * c.std * c.std).ln();
            terms.push(g.add_scalar(scaled, log_norm)?);
        }
        // Per-row max as a constant shift: the log-sum-exp gradient does not depend on it.
        let mut shift = vec![f64::NEG_INFINITY; n];
        for &t in &terms {
            for (s, &v) in shift.iter_mut().zip(g.value(t).data()) {
                *s = s.max(v);
            }
        }
        let shift = g.constant(Tensor::vector(shift));
        let mut acc: Option<NodeId> = None;
        for t in terms {
            let centered = g.sub(t, shift)?;
            let e = g.exp(centered)?;
            acc = Some(match acc {
                Some(a) => g.add(a, e)?,
                None => e,
            });
        }
        let lse = g.log(acc.expect("at least one component"))?;
        let lse = g.add(lse, shift)?;
        Ok(g.neg(lse)?)
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{energies, energy, energy_and_grad_x};

    #[test]
    fn standard_normal_at_origin() {
        let m = MixtureEnergy::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0],
            std: 1.0,
        }])
        .unwrap();
        let e = energy(&m, &Tensor::vector(vec![0.0])).unwrap();
        assert!((e - 0.918_938_533_204_672_7).abs() < 1e-15);
    }

    #[test]
    fn energy_matches_direct_density() {
        let m = MixtureEnergy::ring(8, 4.0, 0.5).unwrap();
        let pts = vec![0.3, -0.2, 4.0, 0.1, -2.8, 2.9, 10.0, 10.0];
        let e = energies(&m, &Tensor::matrix(4, 2, pts.clone()).unwrap()).unwrap();
        for i in 0..4 {
            let direct = -m.density(&pts[2 * i..2 * i + 2]).ln();
            assert!((e.data()[i] - direct).abs() < 1e-9 * direct.abs().max(1.0), "{} vs {}", e.data()[i], direct);
        }
    }

    #[test]
    fn far_points_stay_finite() {
        let m = MixtureEnergy::ring(8, 4.0, 0.1).unwrap();
        let (e, dx) = energy_and_grad_x(&m, &Tensor::matrix(1, 2, vec![60.0, -60.0]).unwrap()).unwrap();
        assert!(e.all_finite() && dx.all_finite());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let c = |w| MixtureComponent {
            weight: w,
            mean: vec![0.0],
            std: 1.0,
        };
        assert!(MixtureEnergy::new(vec![c(0.5), c(0.4)]).is_err());
        assert!(MixtureEnergy::new(vec![c(0.5), c(0.5)]).is_ok());
    }
}
