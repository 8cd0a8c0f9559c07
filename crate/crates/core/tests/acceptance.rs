//! Acceptance criteria at full scale. Each test prints one pass/fail line
//! followed by its diagnostics.

use snmm::acceptance::{run, Scale};

fn check(id: usize) {
    let report = run(id, Scale::Full);
    println!("{report}");
    assert!(report.passed(), "criterion {id} failed");
}

#[test]
fn criterion_01_identification() {
    check(1);
}

#[test]
fn criterion_02_consistency() {
    check(2);
}

#[test]
fn criterion_03_double_robustness() {
    check(3);
}

#[test]
fn criterion_04_solver_equivalence() {
    check(4);
}

#[test]
fn criterion_05_coverage() {
    check(5);
}

#[test]
fn criterion_06_multiplicative() {
    check(6);
}

#[test]
fn criterion_07_sensitivity() {
    check(7);
}

#[test]
fn criterion_08_optimal_regime() {
    check(8);
}

#[test]
fn criterion_09_controlled_direct_effect() {
    check(9);
}

#[test]
fn criterion_10_derived_means() {
    check(10);
}

#[test]
fn criterion_11_real_data() {
    check(11);
}
