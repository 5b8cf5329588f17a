use std::path::PathBuf;
use std::process::ExitCode;

use ccl_core::config::ExperimentConfig;
use ccl_core::report;
use ccl_core::synth::{self, Dataset};
use ccl_core::theory::{error_bounds, BoundInputs};
use ccl_core::trainer::{self, SweepAxis};
use clap::{Args, Parser, Subcommand};
use log::info;

/// Convergence targets and training diagnostics for contrastive objectives.
#[derive(Debug, Parser)]
#[command(name = "ccl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write predicted targets (predicted.csv, predicted.json).
    Predict {
        #[command(flatten)]
        common: Common,
        /// Softmax candidates per anchor; defaults to the training batch size.
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Train one encoder and write its log and report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed; overrides the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run per (value, repeat) along a hyperparameter axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of delta, gamma, tau, batch_size, lr.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write finite-sample error bounds for the configured matrix.
    Bounds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100_000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Failure probability of the bound.
        #[arg(long, default_value_t = 0.05)]
        confidence: f64,
        /// Sup-norm error of the estimated matrix.
        #[arg(long, default_value_t = 0.0)]
        eta_max: f64,
        /// Candidate count for the exact constants.
        #[arg(long)]
        candidates: Option<usize>,
    },
}

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .chain()
                .find_map(|e| e.downcast_ref::<ccl_core::Error>())
                .is_some_and(ccl_core::Error::is_numerical);
            ExitCode::from(if numerical {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            })
        }
    }
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let out = out_dir(common, &cfg);
    Ok((cfg, out))
}

fn dataset(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let ds = if cfg.dataset.graph.is_some() {
        synth::graph_summary_generate(&cfg.dataset)?
    } else {
        synth::generate(&cfg.dataset)?
    };
    Ok(ds)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Predict { common, candidates } => {
            let (cfg, out) = load(&common)?;
            let space = cfg.feature_space()?;
            let n = candidates.unwrap_or(cfg.train.batch_size);
            let artifact = report::write_predicted(&out, &space, n, &cfg.loss)?;
            if let Some(st) = &artifact.scaled_target {
                for w in &st.warnings {
                    log::warn!("{w}");
                }
            }
            let target = ccl_core::theory::predict_target(&space, n)?.target;
            print!("{}", report::format_matrix(&target));
            Ok(())
        }
        Command::Train { common, seed } => {
            let (cfg, out) = load(&common)?;
            let space = cfg.feature_space()?;
            let ds = dataset(&cfg)?;
            let mut tc = cfg.train_config();
            if let Some(s) = seed {
                tc.seed = s;
            }
            report::write_predicted(&out, &space, tc.batch_size, &tc.loss)?;
            let run_id = format!("{}-seed{}", tc.loss.kind, tc.seed);
            let result = match trainer::train(&tc, &ds, &space) {
                Ok(r) => r,
                Err(e) => {
                    report::write_failure(&out, &run_id, &e)?;
                    return Err(anyhow::Error::new(e).context(format!("run {run_id} failed")));
                }
            };
            info!(
                "{run_id}: {} checkpoints in {:.1}s",
                result.records.len(),
                result.duration_secs
            );
            let rep = report::write_run(&out, &run_id, &result, &space, &ds.config)?;
            println!("mae {:.5e}", rep.mae);
            println!(
                "ordering {} (rank correlation {:.5})",
                rep.ordering.matches, rep.ordering.rank_correlation
            );
            println!("mean similarity {:.5}", rep.mean_similarity);
            Ok(())
        }
        Command::Sweep {
            common,
            axis,
            values,
            repeats,
            jobs,
            seed,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let (cfg, out) = load(&common)?;
            let space = cfg.feature_space()?;
            let ds = dataset(&cfg)?;
            let mut base = cfg.train_config();
            if let Some(s) = seed {
                base.seed = s;
            }
            let runs = trainer::sweep(&base, &ds, &space, axis, &values, repeats, jobs)?;
            let mut rows = Vec::with_capacity(runs.len());
            for run in runs {
                let dir = out.join(report::sweep_run_dir(&run));
                let rep = report::write_run(
                    &dir,
                    &report::sweep_run_id(&run),
                    &run.result,
                    &space,
                    &ds.config,
                )?;
                println!(
                    "{}={} rep{}: mae {:.5e} ordering {} mean similarity {:.5}",
                    run.axis,
                    run.value,
                    run.repeat,
                    rep.mae,
                    rep.ordering.matches,
                    rep.mean_similarity
                );
                rows.push((run, rep));
            }
            report::write_sweep_summary(&out.join(report::SUMMARY_CSV), &rows)?;
            Ok(())
        }
        Command::Bounds {
            common,
            n_samples,
            epsilon,
            confidence,
            eta_max,
            candidates,
        } => {
            let (cfg, out) = load(&common)?;
            let space = cfg.feature_space()?;
            let inputs = BoundInputs {
                n_samples,
                confidence_delta: confidence,
                eta_max,
                epsilon,
                candidates,
            };
            let rep = error_bounds(&space, &inputs)?;
            report::write_bounds(&out, &space, &inputs, &rep)?;
            println!("eps_p {:.5e}", rep.eps_p);
            println!("target error bound {:.5e}", rep.target_error_bound);
            println!("sample complexity {:.5e}", rep.sample_complexity);
            println!("feasible {}", rep.feasible);
            Ok(())
        }
    }
}
