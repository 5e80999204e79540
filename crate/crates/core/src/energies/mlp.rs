use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, NodeId, ParamNodes, ParamSet, Tensor};

use super::spectral::{initial_vector, power_step, right_vector};
use super::{EnergyError, EnergyModel};

/// Fully connected energy: softplus hidden layers, one linear scalar output.
///
/// Parameters are `w{l}` (`[fan_in, fan_out]`) and `b{l}` (`[fan_out]`).
/// With spectral normalization on, each weight enters as `W / σ̂` where
/// σ̂ = uᵀ W v uses a persistent left vector `u` (buffer `u{l}`) that
/// [`EnergyModel::refresh`] advances by one power iteration.
#[derive(Clone, Debug)]
pub struct MlpEnergy {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    spectral: Option<Vec<Vec<f64>>>,
}

impl MlpEnergy {
    /// Weights drawn from N(0, 1/fan_in), biases zero.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self, EnergyError> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(EnergyError::Invalid("layer widths must be positive".into()));
        }
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, w)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            sizes,
            weights,
            biases,
            spectral: None,
        })
    }

    pub fn with_spectral_norm(mut self) -> Self {
        self.spectral = Some(self.sizes[..self.sizes.len() - 1].iter().map(|&r| initial_vector(r)).collect());
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn spectral_enabled(&self) -> bool {
        self.spectral.is_some()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }
}

impl EnergyModel for MlpEnergy {
    fn dim(&self) -> usize {
        self.sizes[0]
    }

    fn params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            p.insert(format!("w{}", l), w.clone()).expect("unique");
            p.insert(format!("b{}", l), b.clone()).expect("unique");
        }
        p
    }

    fn set_params(&mut self, params: &ParamSet) -> Result<(), EnergyError> {
        for l in 0..self.weights.len() {
            let w = params.get(&format!("w{}", l))?;
            let b = params.get(&format!("b{}", l))?;
            if w.shape() != self.weights[l].shape() || b.shape() != self.biases[l].shape() {
                return Err(EnergyError::Invalid(format!("layer {} shape changed", l)));
            }
            self.weights[l] = w.clone();
            self.biases[l] = b.clone();
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, theta: &ParamNodes, x: NodeId) -> Result<NodeId, EnergyError> {
        let n = g.shape(x)[0];
        let mut h = x;
        let layers = self.weights.len();
        for l in 0..layers {
            let mut w = theta.get(&format!("w{}", l))?;
            let b = theta.get(&format!("b{}", l))?;
            if let Some(us) = &self.spectral {
                let (rows, cols) = (self.sizes[l], self.sizes[l + 1]);
                let wv = g.value(w).clone();
                let (v, norm) = right_vector(wv.data(), rows, cols, &us[l]);
                if norm > 0.0 {
                    let u = g.constant(Tensor::matrix(1, rows, us[l].clone())?);
                    let v = g.constant(Tensor::matrix(cols, 1, v)?);
                    let uw = g.matmul(u, w)?;
                    let sigma = g.matmul(uw, v)?;
                    let sigma = g.reshape(sigma, &[])?;
                    let inv = g.pow(sigma, -1.0)?;
                    w = g.mul(w, inv)?;
                }
            }
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = if l + 1 < layers { g.softplus(z)? } else { z };
        }
        Ok(g.reshape(h, &[n])?)
    }

    fn buffers(&self) -> ParamSet {
        let mut p = ParamSet::new();
        if let Some(us) = &self.spectral {
            for (l, u) in us.iter().enumerate() {
                p.insert(format!("u{}", l), Tensor::vector(u.clone())).expect("unique");
            }
        }
        p
    }

    fn set_buffers(&mut self, buffers: &ParamSet) -> Result<(), EnergyError> {
        if let Some(us) = &mut self.spectral {
            for (l, u) in us.iter_mut().enumerate() {
                let t = buffers.get(&format!("u{}", l))?;
                if t.len() != u.len() {
                    return Err(EnergyError::Dimension {
                        expected: u.len(),
                        got: t.len(),
                    });
                }
                u.copy_from_slice(t.data());
            }
        }
        Ok(())
    }

    fn refresh(&mut self) {
        if let Some(us) = &mut self.spectral {
            for (l, u) in us.iter_mut().enumerate() {
                power_step(self.weights[l].data(), self.sizes[l], self.sizes[l + 1], u);
            }
        }
    }

    fn clone_box(&self) -> Box<dyn EnergyModel> {
        Box::new(self.clone())
    }
}
