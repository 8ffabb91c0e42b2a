//! Sweeps the isotropic reward u over a log-spaced grid, training the inner
//! policy-gradient problem to convergence at each point, and records the
//! converged outer validation NLL — the empirical counterpart of the
//! roughly convex landscape whose minimum sits near the theoretical optimum.
//! Writes out/landscape/sweep.csv.
//!
//! Run with: cargo run --example loss_landscape

use nllpo::closed_form::isotropic_reward;
use nllpo::harness::{run_landscape, ExperimentKind, ModelKind, RunConfig};

fn main() {
    let cfg = RunConfig {
        experiment: ExperimentKind::Landscape,
        model: ModelKind::Linear,
        epochs: 200,
        lr: 0.02,
        u_min: 0.25,
        u_max: 8.0,
        u_points: 13,
        out_dir: Some("out/landscape".into()),
        ..RunConfig::default()
    };
    let rows = run_landscape(&cfg).expect("sweep runs");

    let (_, truth) = nllpo::data::generate_synthetic(cfg.n, cfg.m, cfg.data_rows, cfg.beta, cfg.seed);
    let u_star = isotropic_reward(&truth.sigma, cfg.lambda);

    println!("{:>10} {:>12}", "u", "outer NLL");
    let mut best: Option<(f64, f64)> = None;
    for (u, nll) in &rows {
        match nll {
            Some(v) => {
                println!("{u:>10.4} {v:>12.5}");
                if best.map_or(true, |(_, bv)| *v < bv) {
                    best = Some((*u, *v));
                }
            }
            None => println!("{u:>10.4} {:>12}", "—"),
        }
    }
    if let Some((u, v)) = best {
        println!("\nargmin u = {u:.4} (outer NLL {v:.5}); theoretical u* = {u_star}");
    }
    println!("csv written to out/landscape/sweep.csv");
}
