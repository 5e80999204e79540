use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ebmforge::diffcore::{ParamSet, Tensor};
use ebmforge::lab::{
    adam_step, clip_global, emit_metrics, mode_coverage, parse_metrics, preset, AdamConfig, AdamState,
    ExperimentConfig, MetricsFormat, MetricsRecord,
};
use ebmforge::objectives::knn_entropy;
use ebmforge::replay::{InitPolicy, NoiseDist, Reservoir};

fn params(a: Vec<f64>, b: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::vector(a)).unwrap();
    p.insert("b", Tensor::vector(b)).unwrap();
    p
}

fn finite() -> impl Strategy<Value = f64> {
    -1e3..1e3f64
}

proptest! {
    #[test]
    fn clipped_gradient_norm_is_bounded(
        a in prop::collection::vec(finite(), 1..6),
        b in prop::collection::vec(finite(), 1..6),
        max in 1e-3..10.0f64,
    ) {
        let g = params(a, b);
        let (c, raw) = clip_global(&g, max);
        prop_assert!(c.norm() <= max + 1e-12);
        prop_assert!((raw - g.norm()).abs() <= 1e-12 * raw.max(1.0));
        if raw <= max {
            prop_assert_eq!(c, g);
        }
    }

    #[test]
    fn adam_moves_each_coordinate_at_most_lr(
        a in prop::collection::vec(finite(), 3),
        b in prop::collection::vec(finite(), 2),
        steps in 1usize..5,
    ) {
        let hyper = AdamConfig::default();
        let mut p = params(vec![0.0; 3], vec![0.0; 2]);
        let mut s = AdamState::new(&p);
        let g = params(a, b);
        for _ in 0..steps {
            let (next, ns, rep) = adam_step(&p, &g, &s, &hyper).unwrap();
            prop_assert!(rep.clipped_norm <= hyper.grad_clip + 1e-12);
            // β1 = 0 and a constant gradient give |m̂| = √v̂.
            for (x, y) in next.flatten().iter().zip(p.flatten()) {
                prop_assert!((x - y).abs() <= hyper.lr * (1.0 + 1e-9));
            }
            p = next;
            s = ns;
        }
        prop_assert_eq!(s.t, steps as u64);
    }

    #[test]
    fn reservoir_keeps_the_newest_states(cap in 1usize..20, pushes in prop::collection::vec(1usize..10, 1..8)) {
        let policy = InitPolicy::NoiseReservoir { noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 }, reinit_prob: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut r = Reservoir::init(policy.clone(), cap, 1, None, &mut rng).unwrap();
        let mut pushed = Vec::new();
        let mut next = 10.0;
        for n in pushes {
            let vals: Vec<f64> = (0..n).map(|i| next + i as f64).collect();
            next += n as f64;
            pushed.extend(vals.iter().copied());
            r.push_finals(&Tensor::matrix(n, 1, vals).unwrap()).unwrap();
            prop_assert_eq!(r.len(), cap);
        }
        let kept: Vec<f64> = r.states().map(|s| s[0]).collect();
        let tail: Vec<f64> = pushed.iter().rev().take(cap).rev().copied().collect();
        prop_assert_eq!(&kept[kept.len() - tail.len()..], &tail[..]);

        let mut bytes = Vec::new();
        r.write_to(&mut bytes).unwrap();
        let back = Reservoir::read_from(bytes.as_slice(), policy).unwrap();
        prop_assert_eq!(back.states().collect::<Vec<_>>(), r.states().collect::<Vec<_>>());
    }

    #[test]
    fn entropy_shifts_by_log_scale(seed in any::<u64>(), c in 0.1..10.0f64) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = knn_entropy(&Tensor::vector(xs.clone())).unwrap();
        let b = knn_entropy(&Tensor::vector(xs.iter().map(|v| v * c).collect())).unwrap();
        prop_assert!((b - a - c.ln()).abs() < 1e-9);
    }

    #[test]
    fn coverage_is_a_fraction(pts in prop::collection::vec(-5.0..5.0f64, 2..40), r in 0.0..3.0f64) {
        let n = pts.len() / 2;
        prop_assume!(n > 0);
        let t = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
        let modes = ebmforge::energies::ring_modes(8, 4.0);
        let c = mode_coverage(&t, &modes, r);
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c * 8.0 - (c * 8.0).round()).abs() < 1e-12);
    }

    #[test]
    fn metrics_round_trip(
        rows in prop::collection::vec((finite(), finite(), prop::option::of(0.0..1.0f64), any::<bool>()), 1..6),
        jsonl in any::<bool>(),
    ) {
        let records: Vec<MetricsRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (a, b, c, s))| MetricsRecord {
                step: i as u64 + 1,
                grad_positive: a.abs(),
                grad_negative: b.abs(),
                grad_kl_entropy: None,
                grad_kl_opt: *c,
                grad_total: a.abs() + b.abs(),
                grad_clipped: 0.1,
                data_energy: *a,
                sample_energy: Some(*b),
                mode_coverage: *c,
                transition_rate: None,
                acceptance: *c,
                oracle_cosine: None,
                skipped: *s,
                wall_secs: 0.5,
            })
            .collect();
        let fmt = if jsonl { MetricsFormat::Jsonl } else { MetricsFormat::Csv };
        let mut buf = Vec::new();
        emit_metrics(&records, fmt, &mut buf).unwrap();
        let back = parse_metrics(buf.as_slice(), fmt).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn sampler_overrides_round_trip(step in 1e-4..10.0f64, steps in 1usize..500, seed in any::<u32>()) {
        let base = preset("mixture-noise-reservoir").unwrap().to_toml().unwrap();
        let overrides = vec![
            ("sampler.step_size".to_string(), format!("{:?}", step)),
            ("sampler.steps".to_string(), steps.to_string()),
            ("seed".to_string(), seed.to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with(&base, &overrides).unwrap();
        prop_assert_eq!(cfg.sampler.step_size, step);
        prop_assert_eq!(cfg.sampler.steps, steps);
        prop_assert_eq!(cfg.seed, seed as u64);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}
