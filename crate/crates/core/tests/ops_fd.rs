mod common;

use common::{check_op, op_cases};

#[test]
fn every_op_matches_finite_differences() {
    for (k, case) in op_cases().iter().enumerate() {
        let (first, second) = check_op(case, 20, 100 + k as u64).unwrap();
        assert!(first <= 1e-5, "{} first order {:e}", case.name, first);
        assert!(second <= 1e-4, "{} second order {:e}", case.name, second);
    }
}
