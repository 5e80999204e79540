use ebmforge::diffcore::Tensor;
use ebmforge::energies::spectral_normalize;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn top_singular(rows: usize, cols: usize, data: &[f64]) -> f64 {
    DMatrix::from_row_slice(rows, cols, data).singular_values().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn power_iteration_matches_svd(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = Tensor::matrix(rows, cols, data.clone()).unwrap();
        let out = spectral_normalize(&w, 500, &mut Vec::new()).unwrap();
        let sigma = top_singular(rows, cols, &data);
        prop_assume!(sigma > 1e-6);
        prop_assert!((out.sigma - sigma).abs() <= 1e-6 * sigma, "{} vs {}", out.sigma, sigma);
        let normalized = top_singular(rows, cols, out.normalized.data());
        prop_assert!((normalized - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn warm_state_converges_across_calls() {
    let data = vec![3.0, 1.0, 0.5, 1.0, 2.0, 0.0, 0.5, 0.0, 1.0];
    let w = Tensor::matrix(3, 3, data.clone()).unwrap();
    let mut state = Vec::new();
    for _ in 0..50 {
        spectral_normalize(&w, 1, &mut state).unwrap();
    }
    let one = spectral_normalize(&w, 1, &mut state).unwrap();
    assert!((one.sigma - top_singular(3, 3, &data)).abs() < 1e-9);
}

#[test]
fn zero_matrix_is_left_alone() {
    let w = Tensor::zeros(&[2, 3]);
    let out = spectral_normalize(&w, 5, &mut Vec::new()).unwrap();
    assert!(out.degenerate);
    assert_eq!(out.normalized, w);
}
