//! Closed-form Gaussian chains for E_θ(x) = ½p(x − θ)² in one dimension.
//!
//! With Gaussian data every chain marginal stays Gaussian, so KL terms,
//! the CD objective and its gradients are available exactly.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1d {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian1d {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn entropy(&self) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.var).ln()
    }
}

/// D_KL[q ‖ p].
pub fn kl_gauss(q: Gaussian1d, p: Gaussian1d) -> f64 {
    let dm = q.mean - p.mean;
    0.5 * ((p.var / q.var).ln() + (q.var + dm * dm) / p.var - 1.0)
}

/// Model density p_θ = N(θ, 1/p).
pub fn model(theta: f64, precision: f64) -> Gaussian1d {
    Gaussian1d::new(theta, 1.0 / precision)
}

/// Marginal after `t` steps of the exact Langevin diffusion over time λ per
/// step (the Ornstein–Uhlenbeck kernel). p_θ is stationary for any λ.
pub fn ou_chain(q0: Gaussian1d, theta: f64, precision: f64, step_size: f64, t: usize) -> Gaussian1d {
    let a = (-0.5 * precision * step_size).exp();
    let mut q = q0;
    for _ in 0..t {
        q = Gaussian1d::new(theta + a * (q.mean - theta), a * a * q.var + (1.0 - a * a) / precision);
    }
    q
}

/// Marginal after `t` unadjusted steps x' = x − (λ/2)p(x − θ) + σξ.
pub fn ula_chain(q0: Gaussian1d, theta: f64, precision: f64, step_size: f64, noise_std: f64, t: usize) -> Gaussian1d {
    let c = 1.0 - 0.5 * step_size * precision;
    let mut q = q0;
    for _ in 0..t {
        q = Gaussian1d::new(theta + c * (q.mean - theta), c * c * q.var + noise_std * noise_std);
    }
    q
}

/// Stationary variance of the unadjusted chain: σ² / (1 − (1 − λp/2)²).
pub fn ula_stationary_var(precision: f64, step_size: f64, noise_std: f64) -> f64 {
    let c = 1.0 - 0.5 * step_size * precision;
    noise_std * noise_std / (1.0 - c * c)
}

/// D_KL[p_data ‖ p_θ] (the NLL up to the data entropy).
pub fn nll_loss(data: Gaussian1d, theta: f64, precision: f64) -> f64 {
    kl_gauss(data, model(theta, precision))
}

/// D_KL[q⁰ ‖ p_θ] − D_KL[qᵗ ‖ p_θ] with q⁰ = p_data and exact-kernel chains.
pub fn cd_loss(data: Gaussian1d, theta: f64, precision: f64, step_size: f64, t: usize) -> f64 {
    let p = model(theta, precision);
    kl_gauss(data, p) - kl_gauss(ou_chain(data, theta, precision, step_size, t), p)
}

/// Expected CD* update for the two-parameter energy E(x) = a x²/2 − b x
/// (precision a, mean b/a): E_data[∇E] − E_{qᵗ}[∇E] with qᵗ the exact-kernel
/// chain started at the data. Returns (∂/∂a, ∂/∂b).
pub fn cd_star_field(data: Gaussian1d, a: f64, b: f64, step_size: f64, t: usize) -> (f64, f64) {
    let q = ou_chain(data, b / a, a, step_size, t);
    let second = |g: Gaussian1d| g.var + g.mean * g.mean;
    (0.5 * (second(data) - second(q)), q.mean - data.mean)
}

/// Exact NLL gradient for the same parameterization (q replaced by p_θ).
pub fn nll_field(data: Gaussian1d, a: f64, b: f64) -> (f64, f64) {
    let p = Gaussian1d::new(b / a, 1.0 / a);
    let second = |g: Gaussian1d| g.var + g.mean * g.mean;
    (0.5 * (second(data) - second(p)), p.mean - data.mean)
}

/// Circulation ∮ F · dθ around a circle of `radius` centred at `center` in the
/// (a, b) plane. The integrand is periodic in the angle, so the trapezoid
/// rule on `segments` points converges spectrally. Zero for a gradient
/// field; a non-zero value means the updates follow no fixed loss.
pub fn circulation(field: impl Fn(f64, f64) -> (f64, f64), center: (f64, f64), radius: f64, segments: usize) -> f64 {
    let h = 2.0 * std::f64::consts::PI / segments as f64;
    let mut total = 0.0;
    for k in 0..segments {
        let ang = h * k as f64;
        let (fa, fb) = field(center.0 + radius * ang.cos(), center.1 + radius * ang.sin());
        total += (-fa * ang.sin() + fb * ang.cos()) * radius * h;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let g = Gaussian1d::new(0.3, 2.0);
        assert_eq!(kl_gauss(g, g), 0.0);
        assert!(kl_gauss(Gaussian1d::new(0.0, 1.0), Gaussian1d::new(1.0, 1.0)) > 0.0);
    }

    #[test]
    fn exact_kernel_keeps_the_model_stationary() {
        let p = model(1.5, 2.0);
        let q = ou_chain(p, 1.5, 2.0, 0.7, 25);
        assert!((q.mean - p.mean).abs() < 1e-15 && (q.var - p.var).abs() < 1e-15);
    }

    #[test]
    fn ula_variance_converges_to_the_discrete_closed_form() {
        let q = ula_chain(Gaussian1d::new(0.0, 0.0), 0.0, 1.0, 0.1, 0.1f64.sqrt(), 2000);
        assert!((q.var - 0.1 / 0.0975).abs() < 1e-12);
        assert!((ula_stationary_var(1.0, 0.1, 0.1f64.sqrt()) - 0.1 / 0.0975).abs() < 1e-15);
    }

    #[test]
    fn nll_field_has_no_circulation() {
        let data = Gaussian1d::new(0.5, 0.8);
        let c = circulation(|a, b| nll_field(data, a, b), (1.2, 0.3), 0.2, 400);
        assert!(c.abs() < 1e-9, "{}", c);
    }
}
