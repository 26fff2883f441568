use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ccl_core::data::{export_snapshot, generate_dataset};
use ccl_core::experiment::{
    ablation_grid, finish_run, parse_override, read_seed_outcome, regime_from_name, run, run_seed,
    write_seed_artifacts, RunConfig, SeedOutcome,
};
use ccl_core::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};

/// Long-tailed semi-supervised training with class-balanced contrastive losses.
///
/// Any argument of the form `--section.key=value` overrides the matching
/// entry of the configuration file, e.g. `--train.steps=200`.
#[derive(Parser, Debug)]
#[command(name = "ccl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train every seed of a configuration and write metrics and a summary.
    Run {
        /// TOML configuration; omit to use the built-in defaults.
        config: Option<PathBuf>,
        /// Train seeds in this many isolated worker processes.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Run the six ablation rows for each regime and write ablation.csv.
    Ablate {
        config: Option<PathBuf>,
        /// Comma-separated: consistent, uniform, reversed, or explicit
        /// values such as 50 or reversed:20.
        #[arg(long, default_value = "consistent,uniform,reversed", value_delimiter = ',')]
        regimes: Vec<String>,
    },
    /// Compare every analytic loss gradient with central finite differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write the synthetic dataset of a configuration as CSV files.
    Datagen {
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run seed whose dataset is exported.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    #[command(hide = true)]
    Worker {
        resolved: PathBuf,
        #[arg(long)]
        seed: u64,
    },
}

fn is_override(arg: &str) -> bool {
    arg.strip_prefix("--")
        .and_then(|body| body.split_once('='))
        .is_some_and(|(key, _)| key.contains('.'))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let config = match path {
        Some(p) => RunConfig::from_file(p, overrides)?,
        None => RunConfig::from_toml_str("", overrides)?,
    };
    config.validate()?;
    Ok(config)
}

fn report_seed(o: &SeedOutcome) {
    let m = &o.final_metrics;
    eprintln!(
        "seed {}: top1 {:.4} ece {:.4} prior_l1 {:.4} ({:.1} s)",
        o.seed, m.top1, m.ece, m.prior_l1, o.wall_seconds
    );
}

fn run_with_workers(config: &RunConfig, workers: usize) -> Result<()> {
    let dir = &config.run.output_dir;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let resolved = dir.join("resolved.toml");
    std::fs::write(&resolved, config.to_toml()).with_context(|| format!("writing {}", resolved.display()))?;
    let exe = std::env::current_exe().context("locating the ccl executable")?;
    let start = Instant::now();
    for chunk in config.run.seeds.chunks(workers) {
        let children = chunk
            .iter()
            .map(|&seed| {
                Command::new(&exe)
                    .arg("worker")
                    .arg(&resolved)
                    .arg(format!("--seed={seed}"))
                    .spawn()
                    .map(|child| (seed, child))
                    .context("spawning a worker")
            })
            .collect::<Result<Vec<_>>>()?;
        for (seed, mut child) in children {
            let status = child.wait()?;
            if !status.success() {
                bail!("worker for seed {seed} failed ({status})");
            }
        }
    }
    let outcomes = config
        .run
        .seeds
        .iter()
        .map(|&s| read_seed_outcome(dir, s))
        .collect::<ccl_core::Result<Vec<_>>>()?;
    outcomes.iter().for_each(report_seed);
    let outcome = finish_run(config, outcomes, start.elapsed().as_secs_f64())?;
    print!("{}", outcome.summary);
    Ok(())
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    match cli.command {
        Cmd::Run { config, workers } => {
            let config = load_config(config.as_deref(), overrides)?;
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            if workers > 1 && config.run.seeds.len() > 1 {
                return run_with_workers(&config, workers);
            }
            let outcome = run(&config, report_seed)?;
            print!("{}", outcome.summary);
        }
        Cmd::Ablate { config, regimes } => {
            let config = load_config(config.as_deref(), overrides)?;
            let regimes = regimes
                .iter()
                .map(|r| regime_from_name(r, config.data.gamma_l))
                .collect::<ccl_core::Result<Vec<_>>>()?;
            let rows = ablation_grid(&config, &regimes, |cell, o| {
                eprint!("{} {} ", cell.data.gamma_u, cell.ablation.label());
                report_seed(o);
            })?;
            print!("{}", ccl_core::experiment::ablation_csv(&rows));
        }
        Cmd::Gradcheck { seeds, step, tolerance } => {
            if !overrides.is_empty() {
                bail!("gradcheck takes no configuration overrides");
            }
            let suite = run_suite(&seeds, step, tolerance)?;
            print!("{}", suite.render());
            if !suite.passed() {
                bail!("gradient check failed: max relative error {:.3e} ≥ {tolerance:e}", suite.max_rel_err());
            }
        }
        Cmd::Datagen { config, out, seed } => {
            let config = load_config(config.as_deref(), overrides)?;
            if config.csv.is_some() {
                bail!("datagen exports the synthetic generator; remove the [csv] section");
            }
            let spec = config.dataset_spec(seed);
            let dataset = generate_dataset(&spec)?;
            export_snapshot(&dataset, &spec, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Worker { resolved, seed } => {
            let config = load_config(Some(&resolved), overrides)?;
            let outcome = run_seed(&config, seed)?;
            write_seed_artifacts(&config.run.output_dir, &outcome)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (overrides, rest): (Vec<String>, Vec<String>) = std::env::args().partition(|a| is_override(a));
    let overrides = match overrides.iter().map(|a| parse_override(a)).collect::<ccl_core::Result<Vec<_>>>() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(rest);
    match execute(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
