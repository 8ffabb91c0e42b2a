//! Experiment driver CLI. Exit codes: 0 success, 2 config error,
//! 3 data error, 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nllpo::harness::{
    run_closed_form_check, run_landscape, run_training_experiment, ExperimentKind, HarnessError,
    LossKind, RunConfig,
};

#[derive(Parser)]
#[command(name = "nllpo", version, about = "Implicit-reward policy-gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Training loss: nll, mse, pg-identity, pg-heuristic, pg-implicit
    #[arg(long)]
    loss: Option<String>,
    /// Entropy-regularization weight λ
    #[arg(long)]
    lambda: Option<f64>,
    /// Base random seed
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds to run (reported as mean ± standard error)
    #[arg(long)]
    seeds: Option<usize>,
    /// Flat key = value config file; flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics, checkpoints, and summaries
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra key=value overrides (any config-file key)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set_values: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Linear-Gaussian synthetic regression (the tractable setting)
    Synth(CommonArgs),
    /// Tabular classification: bundled blob generator or a user CSV
    Classify {
        #[command(flatten)]
        common: CommonArgs,
        /// CSV dataset path (header row, comma separated)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Feature column names, comma separated (CSV mode)
        #[arg(long)]
        features: Option<String>,
        /// Target column name (CSV mode)
        #[arg(long)]
        target: Option<String>,
        /// Class count for the bundled generator
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Outer-loss landscape over the isotropic reward u
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        u_min: Option<f64>,
        #[arg(long)]
        u_max: Option<f64>,
        #[arg(long)]
        u_points: Option<usize>,
    },
    /// Validate the analytic solutions on random instances
    ClosedFormCheck(CommonArgs),
    /// Synthetic dynamics-style regression with the same losses
    Regress(CommonArgs),
}

fn apply_common(cfg: &mut RunConfig, common: &CommonArgs) -> Result<(), HarnessError> {
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(loss) = &common.loss {
        cfg.loss = LossKind::parse(loss)?;
    }
    if let Some(lambda) = common.lambda {
        cfg.lambda = lambda;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(seeds) = common.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    for kv in &common.set_values {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    Ok(())
}

fn print_aggregate(name: &str, agg: &Option<nllpo::harness::Aggregate>) {
    if let Some(a) = agg {
        println!("{name}: {:.6} ± {:.6} (n={})", a.mean, a.std_err, a.count);
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Synth(common) => {
            let mut cfg = RunConfig::default();
            cfg.experiment = ExperimentKind::Synth;
            apply_common(&mut cfg, &common)?;
            cfg.experiment = ExperimentKind::Synth;
            let summary = run_training_experiment(&cfg)?;
            println!("synth: loss={:?} seeds={}", cfg.loss, cfg.seeds);
            print_aggregate("val_nll", &summary.val_nll);
            print_aggregate("val_mse", &summary.val_mse);
            for s in &summary.seeds {
                if s.instability.flagged() {
                    println!(
                        "seed {}: instability flagged (clamp_engaged={}, nll_diverged={})",
                        s.seed, s.instability.clamp_engaged, s.instability.nll_diverged
                    );
                }
            }
            Ok(())
        }
        Command::Classify { common, data, features, target, classes } => {
            let mut cfg = RunConfig::default();
            cfg.experiment = ExperimentKind::Classify;
            cfg.epochs = 150;
            apply_common(&mut cfg, &common)?;
            cfg.experiment = ExperimentKind::Classify;
            if let Some(path) = data {
                cfg.data_path = Some(path);
            }
            if let Some(f) = features {
                cfg.feature_cols = f.split(',').map(|s| s.trim().to_string()).collect();
            }
            if let Some(t) = target {
                cfg.target_col = Some(t);
            }
            if let Some(k) = classes {
                cfg.classes = k;
            }
            let summary = run_training_experiment(&cfg)?;
            println!("classify: loss={:?} seeds={}", cfg.loss, cfg.seeds);
            print_aggregate("test_accuracy", &summary.test_accuracy);
            print_aggregate("test_auc", &summary.test_auc);
            Ok(())
        }
        Command::Landscape { common, u_min, u_max, u_points } => {
            let mut cfg = RunConfig::default();
            cfg.experiment = ExperimentKind::Landscape;
            cfg.epochs = 200;
            apply_common(&mut cfg, &common)?;
            cfg.experiment = ExperimentKind::Landscape;
            if let Some(v) = u_min {
                cfg.u_min = v;
            }
            if let Some(v) = u_max {
                cfg.u_max = v;
            }
            if let Some(v) = u_points {
                cfg.u_points = v;
            }
            let rows = run_landscape(&cfg)?;
            println!("u,outer_nll");
            for (u, nll) in &rows {
                match nll {
                    Some(v) => println!("{u:.6},{v:.6}"),
                    None => println!("{u:.6},"),
                }
            }
            let best = rows
                .iter()
                .filter_map(|(u, nll)| nll.map(|v| (*u, v)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            if let Some((u, v)) = best {
                println!("# argmin u = {u:.6} (outer_nll {v:.6})");
            }
            Ok(())
        }
        Command::ClosedFormCheck(common) => {
            let mut cfg = RunConfig::default();
            cfg.experiment = ExperimentKind::ClosedFormCheck;
            apply_common(&mut cfg, &common)?;
            let lines = run_closed_form_check(&cfg)?;
            let mut all_ok = true;
            for line in &lines {
                println!(
                    "{} {} — {}",
                    if line.passed { "PASS" } else { "FAIL" },
                    line.name,
                    line.detail
                );
                all_ok &= line.passed;
            }
            if !all_ok {
                return Err(HarnessError::Numerical("closed-form check failed".into()));
            }
            Ok(())
        }
        Command::Regress(common) => {
            let mut cfg = RunConfig::default();
            cfg.experiment = ExperimentKind::Regress;
            cfg.n = 4;
            cfg.m = 6;
            apply_common(&mut cfg, &common)?;
            cfg.experiment = ExperimentKind::Regress;
            let summary = run_training_experiment(&cfg)?;
            println!("regress: loss={:?} seeds={}", cfg.loss, cfg.seeds);
            print_aggregate("val_nll", &summary.val_nll);
            print_aggregate("val_mse", &summary.val_mse);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
