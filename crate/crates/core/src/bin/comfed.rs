//! Single executable exposing the experiment runner and the verification
//! suites.
//!
//! Exit codes: 0 success, 1 config error, 2 divergence, 3 verification
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use comfed_core::config::{parse_config, ExperimentConfig};
use comfed_core::error::Error;
use comfed_core::oracles;
use comfed_core::robust;
use comfed_core::runtime;
use comfed_core::telemetry::{self, MetricsFormat, MetricsSink};

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGENCE: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "comfed",
    version,
    about = "Compositional federated learning simulator and verification suites",
    long_about = "Compositional federated learning simulator and verification suites.\n\
                  Exit codes: 0 success, 1 config error, 2 divergence, 3 verification failure.\n\
                  Logging: set COMFED_LOG_LEVEL to error, info, or debug."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file and write metrics plus
    /// a final model checkpoint.
    Run {
        /// Config file (TOML with [experiment], [task], [algorithm] sections).
        #[arg(long)]
        config: PathBuf,
        /// Metrics output path; .jsonl selects JSON lines, anything else CSV.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Checkpoint path for the final model (default: metrics path with
        /// extension .ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Point override applied after parsing, e.g. --set eta=0.05.
        /// Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Shorthand for --set seed=N.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify the worst-case-reweighting / log-sum-exp equivalence and the
    /// optimality of the softmax weights.
    VerifyLemma1 {
        /// Number of clients (loss vector length).
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Regularization temperature.
        #[arg(long, default_value_t = 0.2)]
        gamma: f64,
        /// Number of random loss vectors.
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare analytic gradients of a task family against central finite
    /// differences at random points.
    GradCheck {
        /// Task family: quadratic-dro | logistic-dro |
        /// imbalanced-classification | quadratic-maml | logistic-maml.
        #[arg(long, default_value = "quadratic-dro")]
        task: String,
        /// Number of random probe points.
        #[arg(long, default_value_t = 20)]
        points: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = oracles::DEFAULT_FD_STEP)]
        step: f64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the step-budget schedule on the logistic robust task and fit the
    /// log-log slope of the averaged gradient norms.
    RateFit {
        /// Total-step budgets T, comma separated.
        #[arg(
            long,
            value_delimiter = ',',
            default_values_t = vec![100, 160, 250, 400, 630, 1000, 1600, 2500, 4000, 6300, 10000]
        )]
        t_values: Vec<usize>,
        /// Slope must come out at or below this value.
        #[arg(long, default_value_t = -0.3, allow_hyphen_values = true)]
        threshold: f64,
        /// Minimum number of points the fit requires.
        #[arg(long, default_value_t = 10)]
        min_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Audit recorded per-round drift against the constant-estimate bound.
    DriftCheck {
        /// Metrics file from a previous run (CSV or JSONL).
        #[arg(long, conflicts_with = "config")]
        metrics: Option<PathBuf>,
        /// Config file: run the experiment in memory, then audit it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Point override for --config mode. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run one experiment per parameter value and print a summary table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Swept parameter: tau | gamma | rho.
        #[arg(long)]
        param: String,
        /// Comma-separated values for the swept parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Directory for per-value metrics files.
        #[arg(long, default_value = "sweep-out")]
        out_dir: PathBuf,
        /// Run sweep entries in parallel (experiments share nothing).
        #[arg(long)]
        parallel: bool,
        /// Point override applied to every entry. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("COMFED_LOG_LEVEL", "error");
    env_logger::Builder::from_env(env).init();
    let cli = Cli::parse();
    let code = match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Diverged { .. } => EXIT_DIVERGENCE,
                Error::Verification(_) => EXIT_VERIFICATION,
                _ => EXIT_CONFIG,
            }
        }
    };
    ExitCode::from(code)
}

fn load_config(path: &Path, sets: &[String], seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    for kv in sets {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            Error::validation("--set", format!("expected KEY=VALUE, got `{kv}`"))
        })?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    if let Some(seed) = seed {
        cfg.apply_override("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn dispatch(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run {
            config,
            out,
            checkpoint,
            set,
            seed,
        } => cmd_run(&config, &out, checkpoint.as_deref(), &set, seed),
        Command::VerifyLemma1 {
            n,
            gamma,
            trials,
            seed,
        } => cmd_verify_lemma1(n, gamma, trials, seed),
        Command::GradCheck {
            task,
            points,
            step,
            threshold,
            seed,
        } => cmd_grad_check(&task, points, step, threshold, seed),
        Command::RateFit {
            t_values,
            threshold,
            min_points,
            seed,
        } => cmd_rate_fit(&t_values, threshold, min_points, seed),
        Command::DriftCheck {
            metrics,
            config,
            set,
        } => cmd_drift_check(metrics.as_deref(), config.as_deref(), &set),
        Command::Sweep {
            config,
            param,
            values,
            out_dir,
            parallel,
            set,
        } => cmd_sweep(&config, &param, &values, &out_dir, parallel, &set),
    }
}

fn write_metrics(out: &Path, records: &[runtime::RoundRecord]) -> Result<(), Error> {
    let mut sink = MetricsSink::create(out, MetricsFormat::from_path(out))?;
    for rec in records {
        sink.write_round(rec)?;
    }
    Ok(())
}

fn cmd_run(
    config: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    set: &[String],
    seed: Option<u64>,
) -> Result<u8, Error> {
    let cfg = load_config(config, set, seed)?;
    println!("# resolved config\n{}", cfg.canonical_toml());
    let task = cfg.build_task()?;
    let result = runtime::run(task.as_ref(), &cfg)?;
    write_metrics(out, &result.records)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("ckpt"));
    telemetry::checkpoint_model(&ckpt_path, &result.final_model, cfg.hash())?;
    log::info!(
        "wrote {} rounds to {} and model to {}",
        result.records.len(),
        out.display(),
        ckpt_path.display()
    );
    if result.diverged {
        eprintln!("run diverged; partial metrics kept");
        return Ok(EXIT_DIVERGENCE);
    }
    Ok(EXIT_OK)
}

fn cmd_verify_lemma1(n: usize, gamma: f64, trials: usize, seed: u64) -> Result<u8, Error> {
    let report = robust::verify_lemma1(n, gamma, trials, seed)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_grad_check(
    task: &str,
    points: usize,
    step: f64,
    threshold: f64,
    seed: u64,
) -> Result<u8, Error> {
    let report = oracles::grad_check_family(task, points, step, seed)?;
    let pass = report.max_rel_err <= threshold
        && report.vjp_max_rel_err.is_none_or(|e| e <= threshold);
    let mut json = serde_json::to_value(&report).unwrap();
    json["threshold"] = serde_json::json!(threshold);
    json["pass"] = serde_json::json!(pass);
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(if pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_rate_fit(
    t_values: &[usize],
    threshold: f64,
    min_points: usize,
    seed: u64,
) -> Result<u8, Error> {
    let schedule = runtime::RateSchedule::default();
    let points = runtime::rate_experiment(t_values, &schedule, seed)?;
    let slope = oracles::rate_fit(&points, min_points)?;
    let pass = slope <= threshold;
    let json = serde_json::json!({
        "t_values": t_values,
        "avg_grad_norm_sq": points.iter().map(|&(_, v)| v).collect::<Vec<_>>(),
        "slope": slope,
        "threshold": threshold,
        "pass": pass,
    });
    println!("{}", serde_json::to_string_pretty(&json).unwrap());
    Ok(if pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_drift_check(
    metrics: Option<&Path>,
    config: Option<&Path>,
    set: &[String],
) -> Result<u8, Error> {
    let report = match (metrics, config) {
        (Some(path), _) => {
            let records = telemetry::read_records(path)?;
            runtime::drift_check(&records)
        }
        (None, Some(path)) => {
            let cfg = load_config(path, set, None)?;
            let task = cfg.build_task()?;
            let result = runtime::run(task.as_ref(), &cfg)?;
            if result.diverged {
                return Err(Error::Diverged {
                    round: result.records.len(),
                    value: result
                        .records
                        .last()
                        .map(|r| r.objective)
                        .unwrap_or(f64::NAN),
                });
            }
            runtime::drift_check_with_monitor(&result.records, &result.estimate, &cfg)
        }
        (None, None) => {
            return Err(Error::validation(
                "--metrics",
                "pass --metrics FILE or --config FILE",
            ))
        }
    };
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(if report.pass { EXIT_OK } else { EXIT_VERIFICATION })
}

fn cmd_sweep(
    config: &Path,
    param: &str,
    values: &[f64],
    out_dir: &Path,
    parallel: bool,
    set: &[String],
) -> Result<u8, Error> {
    if values.is_empty() {
        return Err(Error::validation("--values", "need at least one value"));
    }
    let key = match param {
        "tau" => "tau",
        "gamma" => "gamma",
        "rho" => "task.rho",
        other => {
            return Err(Error::validation(
                "--param",
                format!("unknown sweep parameter `{other}` (expected tau | gamma | rho)"),
            ))
        }
    };
    std::fs::create_dir_all(out_dir)?;

    let run_one = |&value: &f64| -> Result<(f64, runtime::RoundRecord), Error> {
        let mut cfg = load_config(config, set, None)?;
        let rendered = if key == "tau" {
            format!("{}", value as usize)
        } else {
            format!("{value}")
        };
        cfg.apply_override(key, &rendered)?;
        let task = cfg.build_task()?;
        let result = runtime::run(task.as_ref(), &cfg)?;
        let out = out_dir.join(format!("{param}-{rendered}.csv"));
        write_metrics(&out, &result.records)?;
        let last = result
            .records
            .last()
            .cloned()
            .ok_or_else(|| Error::validation("rounds", "run produced no records"))?;
        if result.diverged {
            return Err(Error::Diverged {
                round: last.round,
                value: last.objective,
            });
        }
        Ok((value, last))
    };

    let results: Result<Vec<(f64, runtime::RoundRecord)>, Error> = if parallel {
        use rayon::prelude::*;
        values.par_iter().map(run_one).collect()
    } else {
        values.iter().map(run_one).collect()
    };
    let results = results?;

    println!("{param:>10} | {:>14} | {:>14}", "final mean", "final worst");
    let mut summary = String::from("value,final_mean_loss,final_worst_loss\n");
    for (value, last) in &results {
        let mean = last.client_losses.iter().sum::<f64>() / last.client_losses.len() as f64;
        println!("{value:>10} | {mean:>14.6e} | {:>14.6e}", last.worst_loss);
        summary.push_str(&format!(
            "{value},{},{}\n",
            telemetry::format_f64(mean),
            telemetry::format_f64(last.worst_loss)
        ));
    }
    std::fs::write(out_dir.join("summary.csv"), summary)?;
    Ok(EXIT_OK)
}
