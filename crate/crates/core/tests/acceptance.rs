//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with the measured value, threshold, and runtime.

use politex_core::checks::run_criterion;

fn check(id: usize) {
    let scratch = tempfile::tempdir().expect("scratch dir");
    let result = run_criterion(id, scratch.path()).expect("criterion runner");
    println!("{}", result.line());
    assert!(result.pass, "{}", result.line());
}

#[test]
fn acceptance_01_performance_difference_identity() {
    check(1);
}

#[test]
fn acceptance_02_contraction() {
    check(2);
}

#[test]
fn acceptance_03_mirror_descent_step_bound() {
    check(3);
}

#[test]
fn acceptance_04_estimation_error_scaling() {
    check(4);
}

#[test]
fn acceptance_05_regret_sublinearity() {
    check(5);
}

#[test]
fn acceptance_06_subsampled_loss_unbiasedness() {
    check(6);
}

#[test]
fn acceptance_07_coreset_variance_reduction() {
    check(7);
}

#[test]
fn acceptance_08_backend_agreement() {
    check(8);
}

#[test]
fn acceptance_09_cartpole_qualitative_learning() {
    check(9);
}

#[test]
fn acceptance_10_trace_determinism() {
    check(10);
}
