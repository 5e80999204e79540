use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;

use super::LabError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global L2 bound applied to the gradient before the update.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_clip() -> f64 {
    0.1
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: 0.0,
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!("optimizer settings {:?}", self)))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Updates taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(template: &ParamSet) -> Self {
        Self {
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub raw_norm: f64,
    /// Norm of the gradient actually used (after clipping).
    pub clipped_norm: f64,
    pub skipped: bool,
}

/// Rescales `grads` to L2 norm at most `max_norm`. Returns the result and
/// the original norm.
pub fn clip_global(grads: &ParamSet, max_norm: f64) -> (ParamSet, f64) {
    let n = grads.norm();
    if n > max_norm {
        let c = max_norm / n;
        (grads.scale(c), n)
    } else {
        (grads.clone(), n)
    }
}

/// One Adam update with bias correction. Pure: the inputs are untouched.
/// A non-finite gradient leaves parameters and state as they were.
pub fn adam_step(
    params: &ParamSet,
    grads: &ParamSet,
    state: &AdamState,
    hyper: &AdamConfig,
) -> Result<(ParamSet, AdamState, StepReport), LabError> {
    if !grads.all_finite() {
        log::warn!("non-finite gradient at update {}; step skipped", state.t + 1);
        let report = StepReport {
            raw_norm: f64::NAN,
            clipped_norm: 0.0,
            skipped: true,
        };
        return Ok((params.clone(), state.clone(), report));
    }
    let (g, raw) = clip_global(grads, hyper.grad_clip);
    let t = state.t + 1;
    let g2 = ParamSet::from_named(
        g.to_named()
            .into_iter()
            .map(|mut nt| {
                nt.values.iter_mut().for_each(|v| *v *= *v);
                nt
            })
            .collect(),
    )?;
    let m = state.m.scale(hyper.beta1).axpy(1.0 - hyper.beta1, &g)?;
    let v = state.v.scale(hyper.beta2).axpy(1.0 - hyper.beta2, &g2)?;
    let c1 = 1.0 - hyper.beta1.powi(t as i32);
    let c2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut out = Vec::new();
    for ((p, mm), vv) in params.to_named().into_iter().zip(m.to_named()).zip(v.to_named()) {
        if p.name != mm.name || p.values.len() != mm.values.len() {
            return Err(LabError::Config(format!("gradient layout does not match parameter '{}'", p.name)));
        }
        let values = p
            .values
            .iter()
            .zip(&mm.values)
            .zip(&vv.values)
            .map(|((x, a), b)| x - hyper.lr * (a / c1) / ((b / c2).sqrt() + hyper.eps))
            .collect();
        out.push(crate::diffcore::NamedTensor { values, ..p });
    }
    let report = StepReport {
        raw_norm: raw,
        clipped_norm: g.norm(),
        skipped: false,
    };
    Ok((ParamSet::from_named(out)?, AdamState { m, v, t }, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v])).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let hyper = AdamConfig::default();
        let p = single(1.0);
        let (next, st, rep) = adam_step(&p, &single(0.05), &AdamState::new(&p), &hyper).unwrap();
        let moved = 1.0 - next.get("w").unwrap().item();
        assert!((moved - hyper.lr * 0.05 / (0.05 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.t, 1);
        assert_eq!(rep.raw_norm, 0.05);
    }

    #[test]
    fn large_gradients_are_clipped() {
        let mut g = ParamSet::new();
        g.insert("a", Tensor::vector(vec![0.6, 0.0])).unwrap();
        g.insert("b", Tensor::vector(vec![0.8])).unwrap();
        let (c, raw) = clip_global(&g, 0.1);
        assert!((raw - 1.0).abs() < 1e-15);
        assert!((c.norm() - 0.1).abs() < 1e-15);
        assert!((c.get("b").unwrap().data()[0] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn updates_are_pure() {
        let hyper = AdamConfig::default();
        let p = single(0.3);
        let s = AdamState::new(&p);
        let a = adam_step(&p, &single(-2.0), &s, &hyper).unwrap();
        let b = adam_step(&p, &single(-2.0), &s, &hyper).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let p = single(0.3);
        let s = AdamState::new(&p);
        let (next, st, rep) = adam_step(&p, &single(f64::NAN), &s, &AdamConfig::default()).unwrap();
        assert!(rep.skipped);
        assert_eq!(next, p);
        assert_eq!(st, s);
    }
}
