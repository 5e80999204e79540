//! Gradient estimators: exact NLL (quadrature negative phase), MCMC NLL,
//! CD*, and CD with the KL term in both sign conventions.
//!
//! Conventions, with losses minimized:
//! - positive phase: E_data[∇θE]
//! - negative / divergence phase: −E_samples[∇θE] on detached samples
//! - KL term, "correct": minimize −D_KL[qᵗ ‖ p_Ω(θ)] = H(qᵗ) − E_q[E_Ω(x)]
//!   (lower the chain's entropy, raise energy through the chain)
//! - KL term, "flipped": the negation of both parts.

mod entropy;
mod oracle;
mod quadrature;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, ParamSet, Tensor};
use crate::energies::{as_batch, mean_energy_grad_theta, EnergyError, EnergyModel};
use crate::replay::InitPolicy;
use crate::sampling::{run_chain_differentiable, run_chains, ChainStats, SamplerConfig, SamplingError};

pub use entropy::{
    calibrate_entropy_offset, entropy_repel_grad, entropy_repel_loss, kl_opt_grad, kl_opt_loss, knn_entropy,
    knn_entropy_constant, SampleBank, NN_FLOOR,
};
pub use oracle::{
    cd_loss, cd_star_field, circulation, kl_gauss, model as gaussian_model, nll_field, nll_loss, ou_chain, ula_chain,
    ula_stationary_var, Gaussian1d,
};
pub use quadrature::{exact_log_partition, exact_log_partition_grad, exact_nll, exact_nll_grad, Quadrature};

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("invalid objective: {0}")]
    Invalid(String),
    #[error("{fraction:.3e} of the quadrature mass sits on the box boundary (limit {tolerance:e}); enlarge the box")]
    TailMass { fraction: f64, tolerance: f64 },
    #[error("sample {index} coincides with another sample")]
    DuplicateSample { index: usize },
    #[error("the sample bank is empty")]
    EmptyBank,
    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<ObjectiveError>,
    },
}

fn phase<T>(name: &'static str, r: Result<T, ObjectiveError>) -> Result<T, ObjectiveError> {
    r.map_err(|e| ObjectiveError::Phase {
        phase: name,
        source: Box::new(e),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSign {
    Correct,
    Flipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveVariant {
    ExactNll { quadrature: Quadrature },
    McmcNll,
    CdStar,
    CdWithKl { sign: KlSign },
}

impl ObjectiveVariant {
    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveVariant::ExactNll { .. } => "exact_nll",
            ObjectiveVariant::McmcNll => "mcmc_nll",
            ObjectiveVariant::CdStar => "cd_star",
            ObjectiveVariant::CdWithKl { sign: KlSign::Correct } => "cd_kl_correct",
            ObjectiveVariant::CdWithKl { sign: KlSign::Flipped } => "cd_kl_flipped",
        }
    }
}

fn default_kl_weight() -> f64 {
    1.0
}

fn default_k() -> usize {
    3
}

fn default_bank() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub variant: ObjectiveVariant,
    #[serde(default = "default_kl_weight")]
    pub kl_weight: f64,
    /// Steps recorded for backpropagation through the chain (KL variants).
    #[serde(default = "default_k")]
    pub k_backprop: usize,
    #[serde(default = "default_bank")]
    pub entropy_bank_size: usize,
}

impl ObjectiveSpec {
    pub fn new(variant: ObjectiveVariant) -> Self {
        Self {
            variant,
            kl_weight: default_kl_weight(),
            k_backprop: default_k(),
            entropy_bank_size: default_bank(),
        }
    }

    pub fn validate(&self, model: &dyn EnergyModel, sampler: &SamplerConfig) -> Result<(), ObjectiveError> {
        if !(self.kl_weight >= 0.0) || !self.kl_weight.is_finite() {
            return Err(ObjectiveError::Invalid(format!("kl weight {}", self.kl_weight)));
        }
        match &self.variant {
            ObjectiveVariant::ExactNll { quadrature } => {
                if model.dim() > 2 || quadrature.bounds.dim() != model.dim() {
                    return Err(ObjectiveError::Invalid(
                        "exact NLL needs a matching quadrature box and d <= 2".into(),
                    ));
                }
            }
            ObjectiveVariant::CdWithKl { .. } => {
                if self.k_backprop > sampler.steps {
                    return Err(ObjectiveError::Invalid(format!(
                        "k_backprop {} exceeds the {} chain steps",
                        self.k_backprop, sampler.steps
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Where the negative samples came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Chains started at data (true CD).
    Data,
    Persistent,
    Noise,
    /// No samples: quadrature.
    Exact,
}

impl Provenance {
    pub fn from_policy(p: &InitPolicy) -> Self {
        match p {
            InitPolicy::DataCd { .. } => Provenance::Data,
            InitPolicy::Persistent { .. } => Provenance::Persistent,
            InitPolicy::NoiseReservoir { .. } => Provenance::Noise,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeLabel {
    /// Model expectation (exact or MCMC).
    Negative,
    /// Data-initialized short chains.
    Divergence,
}

#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub variant: &'static str,
    pub positive: ParamSet,
    pub negative: ParamSet,
    pub negative_label: NegativeLabel,
    pub kl_entropy: Option<ParamSet>,
    pub kl_opt: Option<ParamSet>,
    pub kl_weight: f64,
    pub total: ParamSet,
    pub provenance: Provenance,
    /// False when the sample provenance does not match the variant's
    /// definition (e.g. a CD variant fed from a noise reservoir).
    pub label_consistent: bool,
    pub data_energy: f64,
    pub sample_energy: f64,
    pub finals: Option<Tensor>,
    pub chain_stats: Option<ChainStats>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseNorms {
    pub positive: f64,
    pub negative: f64,
    pub kl_entropy: Option<f64>,
    pub kl_opt: Option<f64>,
    pub total: f64,
}

impl GradientEstimate {
    pub fn norms(&self) -> PhaseNorms {
        PhaseNorms {
            positive: self.positive.norm(),
            negative: self.negative.norm(),
            kl_entropy: self.kl_entropy.as_ref().map(|p| p.norm()),
            kl_opt: self.kl_opt.as_ref().map(|p| p.norm()),
            total: self.total.norm(),
        }
    }
}

fn nonempty(model: &dyn EnergyModel, batch: &Tensor) -> Result<Tensor, ObjectiveError> {
    let b = as_batch(model, batch)?;
    if b.shape()[0] == 0 {
        return Err(ObjectiveError::Invalid("empty batch".into()));
    }
    Ok(b)
}

/// (1/n) Σ ∇θ E(xᵢ) over data.
pub fn positive_phase_grad(model: &dyn EnergyModel, data: &Tensor) -> Result<ParamSet, ObjectiveError> {
    let b = nonempty(model, data)?;
    Ok(mean_energy_grad_theta(model, &b)?.1)
}

/// −(1/m) Σ ∇θ E(xⱼ) over detached samples.
pub fn negative_phase_grad(model: &dyn EnergyModel, samples: &Tensor) -> Result<ParamSet, ObjectiveError> {
    let b = nonempty(model, samples)?;
    Ok(mean_energy_grad_theta(model, &b)?.1.neg())
}

/// Assembles the variant's phases. Sampling variants run chains from
/// `inits` (one generator per row); the caller owns the reservoir and
/// pushes `finals` back.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradient(
    spec: &ObjectiveSpec,
    model: &dyn EnergyModel,
    data: &Tensor,
    inits: &Tensor,
    sampler: &SamplerConfig,
    rngs: &mut [ChaCha8Rng],
    bank: &mut SampleBank,
    provenance: Provenance,
) -> Result<GradientEstimate, ObjectiveError> {
    spec.validate(model, sampler)?;
    let data = nonempty(model, data)?;
    let (data_energy, positive) = phase("positive", mean_energy_grad_theta(model, &data).map_err(Into::into))?;
    let variant = spec.variant.name();
    match &spec.variant {
        ObjectiveVariant::ExactNll { quadrature } => {
            let (_, negative) = phase("negative", exact_log_partition_grad(model, quadrature))?;
            let total = positive.add(&negative)?;
            Ok(GradientEstimate {
                variant,
                positive,
                negative,
                negative_label: NegativeLabel::Negative,
                kl_entropy: None,
                kl_opt: None,
                kl_weight: 0.0,
                total,
                provenance: Provenance::Exact,
                label_consistent: true,
                data_energy,
                sample_energy: f64::NAN,
                finals: None,
                chain_stats: None,
            })
        }
        ObjectiveVariant::McmcNll | ObjectiveVariant::CdStar => {
            let run = phase("sampling", run_chains(inits, model, sampler, rngs).map_err(Into::into))?;
            let (sample_energy, g) = phase(
                "negative",
                mean_energy_grad_theta(model, &run.final_state).map_err(Into::into),
            )?;
            let negative = g.neg();
            let total = positive.add(&negative)?;
            let cd = matches!(spec.variant, ObjectiveVariant::CdStar);
            Ok(GradientEstimate {
                variant,
                positive,
                negative,
                negative_label: if cd { NegativeLabel::Divergence } else { NegativeLabel::Negative },
                kl_entropy: None,
                kl_opt: None,
                kl_weight: 0.0,
                total,
                provenance,
                label_consistent: if cd {
                    provenance == Provenance::Data
                } else {
                    provenance != Provenance::Data
                },
                data_energy,
                sample_energy,
                finals: Some(run.final_state),
                chain_stats: Some(run.stats),
            })
        }
        ObjectiveVariant::CdWithKl { sign } => {
            let params = model.params();
            let mut g = Graph::new();
            let theta = g.bind_params(&params);
            let chain = phase(
                "sampling",
                run_chain_differentiable(&mut g, &theta, model, inits, sampler, spec.k_backprop, rngs).map_err(Into::into),
            )?;
            let (sample_energy, dg) = phase(
                "divergence",
                mean_energy_grad_theta(model, &chain.final_state).map_err(Into::into),
            )?;
            let negative = dg.neg();
            if bank.is_empty() {
                bank.push(&as_batch(model, inits)?)?;
            }
            let repel = phase(
                "kl_entropy",
                entropy_repel_grad(&mut g, &theta, &params, chain.final_node, bank),
            )?;
            let opt = phase("kl_opt", kl_opt_grad(&mut g, &theta, &params, model, chain.final_node))?;
            let (kl_entropy, kl_opt) = match sign {
                KlSign::Correct => (repel.neg(), opt),
                KlSign::Flipped => (repel, opt.neg()),
            };
            let mut total = positive.add(&negative)?;
            if spec.kl_weight != 0.0 {
                total = total.axpy(spec.kl_weight, &kl_entropy.add(&kl_opt)?)?;
            }
            bank.push(&chain.final_state)?;
            Ok(GradientEstimate {
                variant,
                positive,
                negative,
                negative_label: NegativeLabel::Divergence,
                kl_entropy: Some(kl_entropy),
                kl_opt: Some(kl_opt),
                kl_weight: spec.kl_weight,
                total,
                provenance,
                label_consistent: provenance == Provenance::Data,
                data_energy,
                sample_energy,
                finals: Some(chain.final_state),
                chain_stats: Some(chain.stats),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energies::{BoxBounds, MlpEnergy, QuadraticEnergy};
    use crate::rng::chain_streams;

    fn quad_model(theta: f64) -> QuadraticEnergy {
        QuadraticEnergy::isotropic(vec![theta], 1.0).unwrap()
    }

    #[test]
    fn positive_phase_on_gaussian() {
        let m = quad_model(0.5);
        let data = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let g = positive_phase_grad(&m, &data).unwrap();
        assert!((g.get("mean").unwrap().item() - (0.5 - 1.5)).abs() < 1e-15);
        let at_theta = positive_phase_grad(&m, &Tensor::matrix(1, 1, vec![0.5]).unwrap()).unwrap();
        assert_eq!(at_theta.get("mean").unwrap().item(), 0.0);
        let neg = negative_phase_grad(&m, &Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        assert!((neg.get("mean").unwrap().item() + (0.5 - 3.0)).abs() < 1e-15);
    }

    #[test]
    fn identical_samples_cancel_cd_star() {
        let m = MlpEnergy::new(2, &[4], 1).unwrap();
        let data = Tensor::matrix(3, 2, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0]).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveVariant::CdStar);
        let cfg = SamplerConfig::new(0.1, 0.1, 0);
        let mut bank = SampleBank::new(10, 2);
        let est = compute_gradient(&spec, &m, &data, &data, &cfg, &mut chain_streams(0, "c", 3), &mut bank, Provenance::Data)
            .unwrap();
        assert_eq!(est.total.norm(), 0.0);
        assert!(est.label_consistent);
    }

    #[test]
    fn zero_kl_weight_reduces_to_cd_star() {
        let m = MlpEnergy::new(2, &[5], 3).unwrap();
        let data = Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 0.2]).unwrap();
        let cfg = SamplerConfig::new(0.05, 0.1, 6);
        let star = compute_gradient(
            &ObjectiveSpec::new(ObjectiveVariant::CdStar),
            &m,
            &data,
            &data,
            &cfg,
            &mut chain_streams(7, "c", 2),
            &mut SampleBank::new(10, 2),
            Provenance::Data,
        )
        .unwrap();
        let kl = compute_gradient(
            &ObjectiveSpec {
                kl_weight: 0.0,
                ..ObjectiveSpec::new(ObjectiveVariant::CdWithKl { sign: KlSign::Correct })
            },
            &m,
            &data,
            &data,
            &cfg,
            &mut chain_streams(7, "c", 2),
            &mut SampleBank::new(10, 2),
            Provenance::Data,
        )
        .unwrap();
        assert_eq!(star.total.flatten(), kl.total.flatten());
    }

    #[test]
    fn flipped_sign_negates_the_kl_parts() {
        let m = MlpEnergy::new(2, &[5], 3).unwrap();
        let data = Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 0.2]).unwrap();
        let cfg = SamplerConfig::new(0.05, 0.1, 6);
        let run = |sign| {
            compute_gradient(
                &ObjectiveSpec::new(ObjectiveVariant::CdWithKl { sign }),
                &m,
                &data,
                &data,
                &cfg,
                &mut chain_streams(7, "c", 2),
                &mut SampleBank::new(10, 2),
                Provenance::Noise,
            )
            .unwrap()
        };
        let a = run(KlSign::Correct);
        let b = run(KlSign::Flipped);
        let sa = a.kl_entropy.unwrap().add(&a.kl_opt.unwrap()).unwrap().flatten();
        let sb = b.kl_entropy.unwrap().add(&b.kl_opt.unwrap()).unwrap().flatten();
        assert!(sa.iter().zip(&sb).all(|(x, y)| *x == -*y));
        assert!(!a.label_consistent);
    }

    #[test]
    fn no_recorded_steps_means_no_kl_signal() {
        let m = MlpEnergy::new(2, &[5], 3).unwrap();
        let data = Tensor::matrix(2, 2, vec![0.5, 0.5, -0.5, 0.2]).unwrap();
        let est = compute_gradient(
            &ObjectiveSpec {
                k_backprop: 0,
                ..ObjectiveSpec::new(ObjectiveVariant::CdWithKl { sign: KlSign::Correct })
            },
            &m,
            &data,
            &data,
            &SamplerConfig::new(0.05, 0.1, 4),
            &mut chain_streams(1, "c", 2),
            &mut SampleBank::new(10, 2),
            Provenance::Data,
        )
        .unwrap();
        assert_eq!(est.kl_entropy.unwrap().norm(), 0.0);
        assert_eq!(est.kl_opt.unwrap().norm(), 0.0);
    }

    #[test]
    fn exact_nll_variant_on_gaussian() {
        let m = quad_model(1.0);
        let data = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        let spec = ObjectiveSpec::new(ObjectiveVariant::ExactNll {
            quadrature: Quadrature::new(BoxBounds::cube(1, -10.0, 10.0).unwrap(), 2001),
        });
        let est = compute_gradient(
            &spec,
            &m,
            &data,
            &data,
            &SamplerConfig::default(),
            &mut [],
            &mut SampleBank::new(1, 1),
            Provenance::Noise,
        )
        .unwrap();
        assert!((est.total.get("mean").unwrap().item() - 0.5).abs() < 1e-9);
        assert_eq!(est.provenance, Provenance::Exact);
    }
}
