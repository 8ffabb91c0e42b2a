//! Validates the analytic solutions on random instances: the outer optimum
//! U* = (λ/2)Σ⁻¹, the inner solution θ*(U) = (Λ, λU⁻¹/2), moment matching,
//! and the isotropic family trace condition.
//!
//! Run with: cargo run --example closed_form_check

use nllpo::harness::{run_closed_form_check, ExperimentKind, RunConfig};

fn main() {
    let cfg = RunConfig {
        experiment: ExperimentKind::ClosedFormCheck,
        seed: 7,
        ..RunConfig::default()
    };
    let lines = run_closed_form_check(&cfg).expect("check runs");
    let mut all_ok = true;
    for line in &lines {
        println!("{} {} — {}", if line.passed { "PASS" } else { "FAIL" }, line.name, line.detail);
        all_ok &= line.passed;
    }
    assert!(all_ok, "closed-form validation failed");
    println!("\nall {} checks passed", lines.len());
}
