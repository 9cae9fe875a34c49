mod common;

use common::{l_total_gradient_errors, op_gradient_errors, FD_REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    for (op, err) in op_gradient_errors(20, 11) {
        assert!(err <= FD_REL_TOL, "{op}: worst relative error {err:.3e}");
    }
}

#[test]
fn full_objective_matches_central_differences() {
    for seed in 0..4 {
        let errs = l_total_gradient_errors(seed);
        let bad: Vec<_> = errs.iter().filter(|(_, e)| *e > FD_REL_TOL).collect();
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}
