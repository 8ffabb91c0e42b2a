//! The covariance-heuristic reward on its own: estimates Σ̂ from targets,
//! forms u = λn/(2 Tr Σ̂), and shows how the raw-target estimate over-counts
//! the mean structure compared to the residual-covariance variant and the
//! theoretical optimum.
//!
//! Run with: cargo run --example reward_heuristic

use nllpo::bilevel::{heuristic_reward, heuristic_reward_residual};
use nllpo::closed_form::isotropic_reward;
use nllpo::data::generate_synthetic;

fn main() {
    let lambda = 1.0;
    for beta in [0.25, 0.5, 1.0, 2.0] {
        let (data, truth) = generate_synthetic(2, 2, 20_000, beta, 17);
        let u_raw = heuristic_reward(&data, lambda).unwrap().scalar_u().unwrap();
        let u_resid = heuristic_reward_residual(&data, lambda).unwrap().scalar_u().unwrap();
        let u_ideal = isotropic_reward(&truth.sigma, lambda);
        println!(
            "β = {beta:<5} u(raw targets) = {u_raw:<10.5} u(residuals) = {u_resid:<10.5} u* = {u_ideal:<10.5}"
        );
    }
    println!(
        "\nthe raw-target covariance includes Λ·Cov(X)·Λᵀ on top of Σ, so its u\n\
         shrinks when the mean structure dominates; the residual estimate\n\
         recovers the conditional covariance the theory scales by"
    );
}
