//! Named experiment configurations.

use crate::energies::BoxBounds;
use crate::objectives::{KlSign, ObjectiveSpec, ObjectiveVariant, Quadrature};
use crate::replay::{InitPolicy, NoiseDist};
use crate::sampling::{Augmentation, SamplerConfig, TransitionOp};

use super::config::{EnergySpec, ExperimentConfig, MonitorConfig, OutputConfig};
use super::data::{DatasetSpec, ModeLayout};
use super::optim::AdamConfig;

pub const PRESETS: &[&str] = &[
    "gaussian-mle",
    "grid-oracle",
    "mixture-true-cd",
    "mixture-noise-reservoir",
    "mixture-mode-jump",
    "mixture-cd-kl",
    "digits-multiscale",
    "mnist",
];

/// Half-width of the square used for 2-D noise and quadrature.
pub const MIXTURE_BOX: f64 = 6.0;

pub fn mixture_dataset() -> DatasetSpec {
    DatasetSpec::Mixture2d {
        modes: 8,
        layout: ModeLayout::Ring { radius: 4.0 },
        std: 0.25,
        count: 4000,
    }
}

pub fn mixture_noise() -> NoiseDist {
    NoiseDist::Uniform {
        lo: -MIXTURE_BOX,
        hi: MIXTURE_BOX,
    }
}

/// Sampler used for training on the 2-D mixture.
pub fn mixture_sampler() -> SamplerConfig {
    SamplerConfig::new(0.1, 0.1, 60)
}

fn mixture_base(name: &str, init: InitPolicy, variant: ObjectiveVariant) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        seed: 0,
        steps: 5000,
        batch_size: 64,
        reservoir_capacity: 10_000,
        full_reset_every: None,
        optimizer: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        dataset: mixture_dataset(),
        energy: EnergySpec::Mlp {
            hidden: vec![32, 32],
            spectral_norm: false,
        },
        sampler: mixture_sampler(),
        init,
        objective: ObjectiveSpec::new(variant),
        monitor: MonitorConfig::default(),
        output: OutputConfig::default(),
    }
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let noise_reservoir = InitPolicy::NoiseReservoir {
        noise: mixture_noise(),
        reinit_prob: 0.01,
    };
    let cfg = match name {
        "gaussian-mle" => ExperimentConfig {
            name: name.into(),
            seed: 0,
            steps: 500,
            batch_size: 1000,
            reservoir_capacity: 1,
            full_reset_every: None,
            optimizer: AdamConfig {
                lr: 0.05,
                grad_clip: f64::INFINITY,
                ..AdamConfig::default()
            },
            dataset: DatasetSpec::Gaussian {
                mean: vec![1.5],
                std: 1.0,
                count: 1000,
            },
            energy: EnergySpec::Quadratic {
                mean: None,
                precision: 1.0,
            },
            sampler: SamplerConfig::default(),
            init: InitPolicy::DataCd { reset_prob: 1.0 },
            objective: ObjectiveSpec::new(ObjectiveVariant::ExactNll {
                quadrature: Quadrature::new(BoxBounds::cube(1, -12.0, 12.0).expect("box"), 2401),
            }),
            monitor: MonitorConfig::default(),
            output: OutputConfig::default(),
        },
        "grid-oracle" => {
            let bounds = BoxBounds::cube(2, -2.0, 2.0).expect("box");
            ExperimentConfig {
                name: name.into(),
                seed: 0,
                steps: 200,
                batch_size: 256,
                reservoir_capacity: 4096,
                full_reset_every: None,
                optimizer: AdamConfig {
                    lr: 1e-2,
                    ..AdamConfig::default()
                },
                dataset: DatasetSpec::Mixture2d {
                    modes: 4,
                    layout: ModeLayout::Grid { spacing: 2.0 },
                    std: 0.5,
                    count: 2000,
                },
                energy: EnergySpec::Grid {
                    bounds: bounds.clone(),
                    resolution: vec![4, 4],
                    init: 0.0,
                },
                sampler: SamplerConfig {
                    clamp_box: Some(bounds.clone()),
                    ..SamplerConfig::mala(0.3, 20)
                },
                init: InitPolicy::NoiseReservoir {
                    noise: NoiseDist::Uniform { lo: -2.0, hi: 2.0 },
                    reinit_prob: 0.05,
                },
                objective: ObjectiveSpec::new(ObjectiveVariant::McmcNll),
                monitor: MonitorConfig {
                    oracle: Some(Quadrature::new(bounds, 121)),
                    ..MonitorConfig::default()
                },
                output: OutputConfig::default(),
            }
        }
        "mixture-true-cd" => mixture_base(name, InitPolicy::DataCd { reset_prob: 0.1 }, ObjectiveVariant::CdStar),
        "mixture-noise-reservoir" => mixture_base(name, noise_reservoir, ObjectiveVariant::McmcNll),
        "mixture-mode-jump" => {
            let mut c = mixture_base(name, noise_reservoir, ObjectiveVariant::McmcNll);
            c.sampler.augmentation = Some(Augmentation {
                op: TransitionOp::ModeJump { modes: Vec::new() },
                period: 10,
                metropolis: true,
            });
            c
        }
        "mixture-cd-kl" => {
            let mut c = mixture_base(
                name,
                InitPolicy::DataCd { reset_prob: 0.1 },
                ObjectiveVariant::CdWithKl { sign: KlSign::Correct },
            );
            c.sampler.steps = 20;
            c
        }
        "digits-multiscale" => ExperimentConfig {
            name: name.into(),
            seed: 0,
            steps: 2000,
            batch_size: 32,
            reservoir_capacity: 2000,
            full_reset_every: None,
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::SyntheticDigits {
                count: 2000,
                pixel_noise: 0.05,
            },
            energy: EnergySpec::Multiscale {
                factors: vec![1, 2],
                hidden: vec![64],
                spectral_norm: true,
            },
            sampler: SamplerConfig::raster(64, 60),
            init: InitPolicy::NoiseReservoir {
                noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 },
                reinit_prob: 0.01,
            },
            objective: ObjectiveSpec::new(ObjectiveVariant::McmcNll),
            monitor: MonitorConfig::default(),
            output: OutputConfig::default(),
        },
        "mnist" => ExperimentConfig {
            name: name.into(),
            seed: 0,
            steps: 20_000,
            batch_size: 64,
            reservoir_capacity: 10_000,
            full_reset_every: None,
            optimizer: AdamConfig::default(),
            dataset: DatasetSpec::IdxFile {
                path: "data/train-images-idx3-ubyte".into(),
                downsample: true,
                limit: None,
            },
            energy: EnergySpec::Multiscale {
                factors: vec![1, 2],
                hidden: vec![256, 256],
                spectral_norm: true,
            },
            sampler: SamplerConfig::raster(196, 60),
            init: InitPolicy::NoiseReservoir {
                noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 },
                reinit_prob: 0.01,
            },
            objective: ObjectiveSpec::new(ObjectiveVariant::McmcNll),
            monitor: MonitorConfig::default(),
            output: OutputConfig::default(),
        },
        _ => return None,
    };
    Some(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_round_trips() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let text = cfg.to_toml().unwrap();
            let back = ExperimentConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg, "{}", name);
            assert_eq!(back.to_toml().unwrap(), text, "{}", name);
        }
        assert!(preset("nope").is_none());
    }
}
