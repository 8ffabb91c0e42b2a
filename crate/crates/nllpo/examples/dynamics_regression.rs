//! Multivariate regression on synthetic nonlinear dynamics-style data
//! (state-action inputs, next-state-delta targets) with every loss,
//! including the implicit-differentiation reward. Reports MSE and NLL, the
//! two metrics that matter when such models feed a planner.
//!
//! Run with: cargo run --example dynamics_regression

use nllpo::harness::{run_training_experiment, ExperimentKind, LossKind, RunConfig};

fn main() {
    let base = RunConfig {
        experiment: ExperimentKind::Regress,
        n: 4, // state dimension
        m: 6, // state + action dimension
        data_rows: 2000,
        epochs: 150,
        seeds: 2,
        beta: 0.3,
        out_dir: None,
        ..RunConfig::default()
    };
    println!(
        "dynamics data: state dim {}, input dim {}, noise {}, {} rows\n",
        base.n, base.m, base.beta, base.data_rows
    );

    println!("{:<14} {:>18} {:>18}", "loss", "val MSE (mean±se)", "val NLL (mean±se)");
    for loss in [
        LossKind::Nll,
        LossKind::Mse,
        LossKind::PgIdentity,
        LossKind::PgHeuristic,
        LossKind::PgImplicit,
    ] {
        let cfg = RunConfig { loss, ..base.clone() };
        let summary = run_training_experiment(&cfg).expect("run");
        let fmt = |a: &Option<nllpo::harness::Aggregate>| {
            a.as_ref()
                .map(|v| format!("{:.4} ± {:.4}", v.mean, v.std_err))
                .unwrap_or_else(|| "—".into())
        };
        println!(
            "{:<14} {:>18} {:>18}",
            format!("{:?}", loss),
            fmt(&summary.val_mse),
            fmt(&summary.val_nll)
        );
    }
}
