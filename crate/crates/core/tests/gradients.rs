mod common;

use common::{loss_cases, model_case, op_cases, worst_over_seeds, GradCase, GRAD_SEEDS, GRAD_TOL};

fn check_all(cases: &[GradCase]) {
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|c| {
            let worst = worst_over_seeds(c, GRAD_SEEDS);
            (!(worst < GRAD_TOL)).then(|| format!("{}: {worst:e}", c.name))
        })
        .collect();
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn every_tape_op_matches_finite_differences() {
    check_all(&op_cases());
}

#[test]
fn every_loss_matches_finite_differences() {
    check_all(&loss_cases());
}

#[test]
fn full_model_matches_finite_differences() {
    check_all(&[model_case()]);
}
