//! Power-iteration spectral normalization.

use crate::diffcore::Tensor;

use super::EnergyError;

#[derive(Clone, Debug)]
pub struct SpectralOutcome {
    /// `W / σ̂`, or `W` unchanged when degenerate.
    pub normalized: Tensor,
    /// Power-iteration estimate of the top singular value.
    pub sigma: f64,
    /// Set when the estimate is zero (zero matrix); nothing was divided.
    pub degenerate: bool,
}

/// Deterministic starting vector for the left singular estimate.
pub fn initial_vector(len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|i| 1.0 + 0.5 * ((i + 1) as f64).sin()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `v = normalize(Wᵀ u)` for a row-major `rows × cols` matrix.
pub(crate) fn right_vector(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> (Vec<f64>, f64) {
    let mut v = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            v[j] += w[i * cols + j] * u[i];
        }
    }
    let n = normalize(&mut v);
    (v, n)
}

/// One power-iteration sweep; updates `u` in place and returns σ̂ = ‖W v‖.
pub(crate) fn power_step(w: &[f64], rows: usize, cols: usize, u: &mut [f64]) -> f64 {
    let (v, n) = right_vector(w, rows, cols, u);
    if n == 0.0 {
        return 0.0;
    }
    let mut wu = vec![0.0; rows];
    for i in 0..rows {
        wu[i] = (0..cols).map(|j| w[i * cols + j] * v[j]).sum();
    }
    let sigma = normalize(&mut wu);
    if sigma > 0.0 {
        u.copy_from_slice(&wu);
    }
    sigma
}

/// Divides `weight` by the power-iteration estimate of its largest singular
/// value. `state` is the persistent left singular vector (length = rows);
/// pass an empty vector to start from [`initial_vector`].
pub fn spectral_normalize(weight: &Tensor, iters: usize, state: &mut Vec<f64>) -> Result<SpectralOutcome, EnergyError> {
    let &[rows, cols] = weight.shape() else {
        return Err(EnergyError::Invalid(format!("spectral norm needs a matrix, got {:?}", weight.shape())));
    };
    if iters == 0 {
        return Err(EnergyError::Invalid("spectral norm needs at least one iteration".into()));
    }
    if state.is_empty() {
        *state = initial_vector(rows);
    }
    if state.len() != rows {
        return Err(EnergyError::Dimension {
            expected: rows,
            got: state.len(),
        });
    }
    let mut u = state.clone();
    let mut sigma = 0.0;
    for _ in 0..iters {
        sigma = power_step(weight.data(), rows, cols, &mut u);
        if sigma == 0.0 {
            break;
        }
    }
    if sigma == 0.0 {
        log::warn!("spectral norm of a zero matrix; weight left unchanged");
        return Ok(SpectralOutcome {
            normalized: weight.clone(),
            sigma: 0.0,
            degenerate: true,
        });
    }
    *state = u;
    Ok(SpectralOutcome {
        normalized: weight.map(|v| v / sigma),
        sigma,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_divides_by_largest_entry() {
        let w = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut state = Vec::new();
        let out = spectral_normalize(&w, 30, &mut state).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-9);
        let mut again = Vec::new();
        let renorm = spectral_normalize(&out.normalized, 30, &mut again).unwrap();
        assert!((renorm.sigma - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_matrix_is_unchanged() {
        let (c, s) = (0.6f64, 0.8f64);
        let w = Tensor::matrix(2, 2, vec![c, -s, s, c]).unwrap();
        let out = spectral_normalize(&w, 5, &mut Vec::new()).unwrap();
        assert!(out.normalized.max_abs_diff(&w) < 1e-6);
    }

    #[test]
    fn zero_matrix_is_flagged() {
        let w = Tensor::zeros(&[3, 2]);
        let mut state = Vec::new();
        let out = spectral_normalize(&w, 3, &mut state).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.normalized, w);
    }

    #[test]
    fn normalizing_twice_is_idempotent() {
        let w = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 0.3, 2.0, 1.0]).unwrap();
        let once = spectral_normalize(&w, 50, &mut Vec::new()).unwrap().normalized;
        let twice = spectral_normalize(&once, 50, &mut Vec::new()).unwrap().normalized;
        let frob: f64 = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(frob < 1e-6, "{}", frob);
    }

    #[test]
    fn rejects_zero_iterations_and_bad_state() {
        let w = Tensor::ones(&[2, 2]);
        assert!(spectral_normalize(&w, 0, &mut Vec::new()).is_err());
        assert!(spectral_normalize(&w, 1, &mut vec![1.0; 3]).is_err());
    }
}
