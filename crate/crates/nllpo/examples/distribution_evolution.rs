//! Tracks the learned conditional distribution at a single training input
//! across epochs: how μ_θ(x) and σ_θ(x) approach the target under the NLL
//! loss versus the policy-gradient loss with the optimal-scale reward.
//! Writes one CSV per loss under out/distribution_evolution/.
//!
//! Run with: cargo run --example distribution_evolution

use std::io::Write;

use nllpo::autodiff::value_and_gradient;
use nllpo::data::generate_synthetic;
use nllpo::linalg::Vector;
use nllpo::models::GaussianPolicy;
use nllpo::objectives::{Estimator, GaussianNll, GaussianPg, PgConfig, RewardParams};
use nllpo::optim::{Adam, Optimizer};
use nllpo::rng::RngStream;

fn main() {
    let out_dir = std::path::Path::new("out/distribution_evolution");
    std::fs::create_dir_all(out_dir).expect("create output dir");

    let (n, m, rows, beta, lambda) = (2, 2, 2000, 0.5, 1.0);
    let (data, truth) = generate_synthetic(n, m, rows, beta, 11);
    let xs = data.inputs_rows(&data.split.train);
    let ys = data.targets_rows(&data.split.train);

    // the probe point: first training input
    let probe = Vector::new(xs.row(0).to_vec());
    let target_mean = truth.mean(&probe);
    println!("probe x = {:?}", probe.data());
    println!("target μ = {:?}, target σ = {beta}\n", target_mean.data());

    let u_star = nllpo::closed_form::isotropic_reward(&truth.sigma, lambda);
    let reward = RewardParams::scalar_isotropic(n, u_star);
    let pg_cfg = PgConfig::new(lambda, 8, Estimator::Reparameterized).unwrap();

    for pg in [false, true] {
        let name = if pg { "pg_optimal" } else { "nll" };
        let mut rng = RngStream::seed(11);
        let mut policy = GaussianPolicy::mlp(m, n, &[64, 64], &mut rng);
        let mut opt = Optimizer::Adam(Adam::new(1e-3, policy.params().len()));
        let path = out_dir.join(format!("{name}.csv"));
        let mut file = std::fs::File::create(&path).expect("create csv");
        writeln!(file, "epoch,mu0,mu1,sigma0,sigma1").unwrap();

        for epoch in 0..=200 {
            let (mu, lv) = policy.mean_and_logvar(&probe);
            writeln!(
                file,
                "{epoch},{},{},{},{}",
                mu[0],
                mu[1],
                (0.5 * lv[0]).exp(),
                (0.5 * lv[1]).exp()
            )
            .unwrap();
            if epoch == 200 {
                println!(
                    "{name:<10} epoch {epoch}: μ = [{:+.3}, {:+.3}] σ = [{:.3}, {:.3}]",
                    mu[0],
                    mu[1],
                    (0.5 * lv[0]).exp(),
                    (0.5 * lv[1]).exp()
                );
                break;
            }
            let grad = if pg {
                let loss = GaussianPg::new(&policy, &xs, &ys, &reward, pg_cfg, &mut rng).unwrap();
                value_and_gradient(&loss, policy.params()).unwrap().1
            } else {
                let loss = GaussianNll::new(&policy, &xs, &ys).unwrap();
                value_and_gradient(&loss, policy.params()).unwrap().1
            };
            opt.step(policy.params_mut().values_mut(), &grad).unwrap();
        }
    }
    println!("\ntrajectories written to {}", out_dir.display());
}
