//! Sampling diagnostics for synthetic data with known modes.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::energies::{energies, EnergyModel};
use crate::replay::NoiseDist;
use crate::rng::{chain_streams, stream};
use crate::sampling::{nearest_mode, run_chains, SamplerConfig};

use super::data::Dataset;
use super::LabError;

fn within(x: &[f64], m: &[f64], r2: f64) -> bool {
    x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2
}

/// Fraction of modes with at least one sample within `radius`.
pub fn mode_coverage(samples: &Tensor, modes: &[Vec<f64>], radius: f64) -> f64 {
    if modes.is_empty() {
        return 0.0;
    }
    let n = if samples.ndim() == 2 { samples.shape()[0] } else { 1 };
    let r2 = radius * radius;
    let hit = modes
        .iter()
        .filter(|m| (0..n).any(|i| within(row(samples, i), m, r2)))
        .count();
    hit as f64 / modes.len() as f64
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    if t.ndim() == 2 {
        t.row(i)
    } else {
        t.data()
    }
}

/// Nearest-mode changes along one chain, per 10³ steps.
pub fn mixing_rate(trajectory: &[Vec<f64>], modes: &[Vec<f64>]) -> f64 {
    if trajectory.len() < 2 || modes.is_empty() {
        return 0.0;
    }
    let labels: Vec<usize> = trajectory.iter().map(|x| nearest_mode(x, modes)).collect();
    let changes = labels.windows(2).filter(|w| w[0] != w[1]).count();
    1000.0 * changes as f64 / (trajectory.len() - 1) as f64
}

/// Per-chain [`mixing_rate`] for a batched trajectory (`[n, d]` per step),
/// optionally prefixed by the initial states.
pub fn chain_mixing_rates(init: Option<&Tensor>, trajectory: &[Tensor], modes: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = init.or(trajectory.first()) else {
        return Vec::new();
    };
    let n = first.shape()[0];
    (0..n)
        .map(|i| {
            let path: Vec<Vec<f64>> = init
                .into_iter()
                .chain(trajectory.iter())
                .map(|t| t.row(i).to_vec())
                .collect();
            mixing_rate(&path, modes)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Three robust standard deviations (1.4826 · MAD) of the reference energies.
pub fn default_delta(reference_energies: &[f64]) -> f64 {
    let med = median(reference_energies);
    let dev: Vec<f64> = reference_energies.iter().map(|e| (e - med).abs()).collect();
    3.0 * 1.4826 * median(&dev)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub delta: f64,
    pub data_energy_median: f64,
    /// Fraction of noise-initialized chains ending within δ of the median.
    pub noise_success: f64,
    pub data_success: f64,
    pub noise_final_energies: Vec<f64>,
    pub data_final_energies: Vec<f64>,
    #[serde(skip)]
    pub noise_finals: Option<Tensor>,
}

/// Runs chains from noise and from data and compares their final energies
/// with the median energy of `reference` data. `delta = None` uses
/// [`default_delta`].
pub fn spurious_minima_probe(
    model: &dyn EnergyModel,
    noise_inits: &Tensor,
    data_inits: &Tensor,
    reference: &Tensor,
    sampler: &SamplerConfig,
    delta: Option<f64>,
    seed: u64,
) -> Result<ProbeReport, LabError> {
    let ref_e = energies(model, reference)?.into_data();
    if ref_e.is_empty() {
        return Err(LabError::Config("probe needs reference data".into()));
    }
    let med = median(&ref_e);
    let delta = delta.unwrap_or_else(|| default_delta(&ref_e));
    let run = |inits: &Tensor, tag: &str| -> Result<(Vec<f64>, Tensor), LabError> {
        let mut rngs = chain_streams(seed, tag, inits.shape()[0]);
        let r = run_chains(inits, model, sampler, &mut rngs)?;
        Ok((r.stats.final_energies, r.final_state))
    };
    let (noise_e, noise_finals) = run(noise_inits, "probe-noise")?;
    let (data_e, _) = run(data_inits, "probe-data")?;
    let frac = |es: &[f64]| {
        if es.is_empty() {
            return 0.0;
        }
        es.iter().filter(|e| (*e - med).abs() <= delta).count() as f64 / es.len() as f64
    };
    Ok(ProbeReport {
        delta,
        data_energy_median: med,
        noise_success: frac(&noise_e),
        data_success: frac(&data_e),
        noise_final_energies: noise_e,
        data_final_energies: data_e,
        noise_finals: Some(noise_finals),
    })
}

/// Chain starts for [`spurious_minima_probe`]: `n` noise draws, `n` data
/// points and `reference` data points, all from streams of `seed`.
pub fn probe_inits(
    dataset: &Dataset,
    noise: &NoiseDist,
    n: usize,
    reference: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, Tensor), LabError> {
    let d = dataset.dim();
    let mut rng = stream(seed, "probe-noise-inits", &[]);
    let pts: Vec<f64> = (0..n).flat_map(|_| noise.draw(d, &mut rng)).collect();
    let noise_inits = Tensor::matrix(n, d, pts)?;
    let data_inits = dataset.batch(n, &mut stream(seed, "probe-data-inits", &[]));
    let reference = dataset.batch(reference, &mut stream(seed, "probe-reference", &[]));
    Ok((noise_inits, data_inits, reference))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::MixtureEnergy;

    fn ring() -> Vec<Vec<f64>> {
        crate::energies::ring_modes(8, 4.0)
    }

    #[test]
    fn coverage_extremes() {
        let modes = ring();
        let all = Tensor::matrix(8, 2, modes.concat()).unwrap();
        assert_eq!(mode_coverage(&all, &modes, 0.1), 1.0);
        let one = Tensor::matrix(3, 2, [modes[2].clone(), modes[2].clone(), modes[2].clone()].concat()).unwrap();
        assert_eq!(mode_coverage(&one, &modes, 0.1), 1.0 / 8.0);
    }

    #[test]
    fn mixing_extremes() {
        let modes = vec![vec![-1.0], vec![1.0]];
        assert_eq!(mixing_rate(&vec![vec![0.9]; 50], &modes), 0.0);
        let alt: Vec<Vec<f64>> = (0..1001).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 }]).collect();
        assert_eq!(mixing_rate(&alt, &modes), 1000.0);
    }

    #[test]
    fn infinite_delta_accepts_everything() {
        let m = MixtureEnergy::ring(4, 2.0, 0.3).unwrap();
        let pts = Tensor::matrix(3, 2, vec![0.0, 0.0, 5.0, 5.0, 2.0, 0.0]).unwrap();
        let rep = spurious_minima_probe(&m, &pts, &pts, &pts, &SamplerConfig::mala(0.05, 5), Some(f64::INFINITY), 1)
            .unwrap();
        assert_eq!(rep.noise_success, 1.0);
        assert_eq!(rep.data_success, 1.0);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
