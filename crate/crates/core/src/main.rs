use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use balgpd::harness::report::{emit_aggregate_csv, emit_run_csv, format_float};
use balgpd::harness::{format_config, parse_config, run_replications};
use balgpd::information::trials;
use balgpd::oracles::load_elevation_csv;
use balgpd::Error;

#[derive(Parser)]
#[command(
    name = "balgpd",
    version,
    about = "Batch active learning for GPs with derivatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file and write CSV results.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Fill the wall_ms column (output is then no longer reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Check the covariance ordering and trace bound on random instances.
    ValidateTheory {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate slopes of a scattered elevation file.
    EstimateGradients {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse { .. } | Error::EmptyFile(_) => Failure::Config(e),
            other => Failure::Runtime(other),
        }
    }
}

fn run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    replications: Option<usize>,
    timing: bool,
) -> Result<(), Failure> {
    let text = fs::read_to_string(config).map_err(|e| Failure::Config(e.into()))?;
    let mut cfg = parse_config(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = replications {
        cfg.replications = r;
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(out.join("config.txt"), format_config(&cfg))
        .map_err(|e| Failure::Runtime(e.into()))?;
    let agg = run_replications(&cfg)?;
    for r in agg.completed() {
        emit_run_csv(
            r,
            &out.join(format!("run_seed{}.csv", r.config.seed)),
            timing,
        )?;
    }
    emit_aggregate_csv(&agg, &out.join("aggregate.csv"))?;
    let failed: Vec<_> = agg.failures().collect();
    for (s, reason) in &failed {
        eprintln!("run with seed {s} failed: {reason}");
    }
    let done = agg.completed().count();
    println!(
        "{} {} {}: {done} runs completed, {} failed",
        cfg.experiment,
        cfg.scheme,
        cfg.criterion,
        failed.len()
    );
    if let Some(last) = agg.rows.last() {
        println!(
            "round {} points {} median rmse {}",
            last.round,
            last.points_total,
            format_float(last.rmse_median)
        );
    }
    if done == 0 {
        return Err(Failure::Runtime(Error::NoFeasibleStart));
    }
    Ok(())
}

fn validate_theory(n: usize, seed: u64) -> Result<bool, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = trials::run_checks(n, &mut rng)?;
    let rows = [
        ("ig ordering", report.proposition1),
        ("covariance ordering", report.theorem1),
        ("criterion dominance", report.dominance),
        ("trace bound", report.lemma1),
    ];
    for (name, t) in &rows {
        println!("{name}: {} passed, {} failed", t.passed, t.failed);
    }
    Ok(rows.iter().all(|(_, t)| t.failed == 0))
}

fn estimate_gradients(input: &Path, out: &Path) -> Result<(), Failure> {
    let mut data = load_elevation_csv(input, 1.0, 0)?;
    let grads = data.estimate_gradients()?.clone();
    let mut text = String::from("x1,x2,height,slope1,slope2\n");
    for ((c, h), g) in data.coordinates.rows().zip(&data.heights).zip(grads.rows()) {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            format_float(c[0]),
            format_float(c[1]),
            format_float(*h),
            format_float(g[0]),
            format_float(g[1])
        ));
    }
    fs::write(out, text).map_err(|e| Failure::Runtime(e.into()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            replications,
            timing,
        } => run(&config, &out, seed, replications, timing),
        Command::ValidateTheory { trials, seed } => match validate_theory(trials, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::EstimateGradients { input, out } => estimate_gradients(&input, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
