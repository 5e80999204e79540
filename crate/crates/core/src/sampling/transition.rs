use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SamplingError;

/// Non-Langevin moves applied periodically inside a chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransitionOp {
    /// Adds N(0, scale²) to every coordinate.
    GaussianJitter { scale: f64 },
    /// Smooth random warp of a `height × width` raster. Displacements are
    /// drawn on a coarse grid every `grid_spacing` pixels with std
    /// `amplitude` (pixels) and interpolated bilinearly; each pixel's value is
    /// then splatted bilinearly to its displaced position.
    ElasticDeformation {
        height: usize,
        width: usize,
        grid_spacing: usize,
        amplitude: f64,
    },
    /// Translates the state from its nearest mode to a different mode drawn
    /// uniformly, keeping the offset. A desk-scale stand-in for
    /// semantically meaningful augmentations. An empty list is filled in
    /// from the dataset by the training harness.
    ModeJump {
        #[serde(default)]
        modes: Vec<Vec<f64>>,
    },
}

impl TransitionOp {
    pub fn validate(&self, dim: usize) -> Result<(), SamplingError> {
        match self {
            TransitionOp::GaussianJitter { scale } => {
                if !(*scale >= 0.0) || !scale.is_finite() {
                    return Err(SamplingError::Config(format!("jitter scale {}", scale)));
                }
            }
            TransitionOp::ElasticDeformation {
                height,
                width,
                grid_spacing,
                amplitude,
            } => {
                if height * width != dim {
                    return Err(SamplingError::Layout(format!(
                        "{}x{} raster for {}-dimensional states",
                        height, width, dim
                    )));
                }
                if *grid_spacing == 0 || !(*amplitude >= 0.0) || !amplitude.is_finite() {
                    return Err(SamplingError::Config(format!(
                        "elastic grid spacing {} amplitude {}",
                        grid_spacing, amplitude
                    )));
                }
            }
            TransitionOp::ModeJump { modes } => {
                if modes.is_empty() {
                    return Err(SamplingError::Config("mode jump without modes".into()));
                }
                if let Some(m) = modes.iter().find(|m| m.len() != dim) {
                    return Err(SamplingError::Layout(format!(
                        "{}-dimensional mode for {}-dimensional states",
                        m.len(),
                        dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether the proposal is symmetric, so a Metropolis test on the
    /// energy difference alone is valid.
    pub fn symmetric(&self) -> bool {
        !matches!(self, TransitionOp::ElasticDeformation { .. })
    }
}

/// Applies `op` to one state.
pub fn apply_transition<R: Rng + ?Sized>(x: &[f64], op: &TransitionOp, rng: &mut R) -> Result<Vec<f64>, SamplingError> {
    op.validate(x.len())?;
    Ok(match op {
        TransitionOp::GaussianJitter { scale } => x
            .iter()
            .map(|&v| {
                let z: f64 = rng.sample(StandardNormal);
                v + scale * z
            })
            .collect(),
        TransitionOp::ElasticDeformation {
            height,
            width,
            grid_spacing,
            amplitude,
        } => elastic(x, *height, *width, *grid_spacing, *amplitude, rng),
        TransitionOp::ModeJump { modes } => mode_jump(x, modes, rng),
    })
}

/// Index of the mode closest to `x` (first one on ties).
pub fn nearest_mode(x: &[f64], modes: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, m) in modes.iter().enumerate() {
        let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn mode_jump<R: Rng + ?Sized>(x: &[f64], modes: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    if modes.len() < 2 {
        return x.to_vec();
    }
    let from = nearest_mode(x, modes);
    let mut to = rng.random_range(0..modes.len() - 1);
    if to >= from {
        to += 1;
    }
    x.iter()
        .zip(&modes[from])
        .zip(&modes[to])
        .map(|((v, a), b)| v - a + b)
        .collect()
}

fn elastic<R: Rng + ?Sized>(x: &[f64], h: usize, w: usize, spacing: usize, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let gh = (h - 1).div_ceil(spacing) + 1;
    let gw = (w - 1).div_ceil(spacing) + 1;
    let mut field = Vec::with_capacity(gh * gw * 2);
    for _ in 0..gh * gw * 2 {
        let z: f64 = rng.sample(StandardNormal);
        field.push(amplitude * z);
    }
    let node = |i: usize, j: usize, c: usize| field[(i * gw + j) * 2 + c];
    let s = spacing as f64;
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let gr = r as f64 / s;
        let i0 = (gr.floor() as usize).min(gh.saturating_sub(2));
        let i1 = (i0 + 1).min(gh - 1);
        let fr = gr - i0 as f64;
        for c in 0..w {
            let gc = c as f64 / s;
            let j0 = (gc.floor() as usize).min(gw.saturating_sub(2));
            let j1 = (j0 + 1).min(gw - 1);
            let fc = gc - j0 as f64;
            let disp = |k: usize| {
                (1.0 - fr) * (1.0 - fc) * node(i0, j0, k)
                    + (1.0 - fr) * fc * node(i0, j1, k)
                    + fr * (1.0 - fc) * node(i1, j0, k)
                    + fr * fc * node(i1, j1, k)
            };
            let v = x[r * w + c];
            let tr = r as f64 + disp(0);
            let tc = c as f64 + disp(1);
            let (r0, c0) = (tr.floor(), tc.floor());
            let (ar, ac) = (tr - r0, tc - c0);
            for (dr, wr) in [(0, 1.0 - ar), (1, ar)] {
                for (dc, wc) in [(0, 1.0 - ac), (1, ac)] {
                    let rr = r0 as i64 + dr;
                    let cc = c0 as i64 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        out[rr as usize * w + cc as usize] += v * wr * wc;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_jitter_is_identity() {
        let x = vec![0.3, -1.2, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = apply_transition(&x, &TransitionOp::GaussianJitter { scale: 0.0 }, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn zero_amplitude_warp_is_identity() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let op = TransitionOp::ElasticDeformation {
            height: 8,
            width: 8,
            grid_spacing: 3,
            amplitude: 0.0,
        };
        let y = apply_transition(&x, &op, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12);
    }

    #[test]
    fn warp_keeps_mass_of_a_central_pixel() {
        let op = TransitionOp::ElasticDeformation {
            height: 8,
            width: 8,
            grid_spacing: 4,
            amplitude: 0.8,
        };
        let mut x = vec![0.0; 64];
        x[3 * 8 + 4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let y = apply_transition(&x, &op, &mut rng).unwrap();
            let mass: f64 = y.iter().sum();
            assert!((mass - 1.0).abs() <= 0.05, "{}", mass);
        }
    }

    #[test]
    fn mode_jump_preserves_offset_and_changes_mode() {
        let modes = vec![vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let op = TransitionOp::ModeJump { modes: modes.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let y = apply_transition(&[0.2, -0.1], &op, &mut rng).unwrap();
            let m = nearest_mode(&y, &modes);
            assert_ne!(m, 0);
            assert!((y[0] - modes[m][0] - 0.2).abs() < 1e-12);
            assert!((y[1] - modes[m][1] + 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_mismatch_is_an_error() {
        let op = TransitionOp::ElasticDeformation {
            height: 3,
            width: 3,
            grid_spacing: 2,
            amplitude: 1.0,
        };
        let err = apply_transition(&[0.0; 8], &op, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, SamplingError::Layout(_)));
    }
}
