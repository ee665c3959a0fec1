use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distq::harness::{run_congestion, run_experiment, sweep, BoundsReport, ExperimentConfig, SweepParam};
use distq::Error;

#[derive(Parser)]
#[command(name = "distq", version, about = "Distributed tabular Q-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Override the output directory (takes precedence over DISTQ_OUTPUT_DIR).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Skip the per-step lemma checks.
    #[arg(long)]
    no_checks: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its traces.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Repeat an experiment over several values of one parameter.
    Sweep {
        config: PathBuf,
        /// alpha, N or topology
        #[arg(long)]
        vary: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the congestion game and write the greedy-policy report.
    Congestion {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print spectral, sampling and mixing constants of a configuration.
    Bounds {
        config: PathBuf,
        /// Target accuracy for the step-size prescriptions.
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
    },
}

fn load(path: &PathBuf, overrides: Option<&Overrides>) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(path)?;
    config.apply_env();
    if let Some(o) = overrides {
        if let Some(dir) = &o.output {
            config.output_dir = dir.clone();
        }
        if let Some(v) = o.steps {
            config.num_steps = v;
        }
        if let Some(v) = o.runs {
            config.num_runs = v;
        }
        if let Some(v) = o.seed {
            config.base_seed = v;
        }
        if let Some(v) = o.alpha {
            config.alpha = v;
            config.agent_alphas = None;
        }
        if o.no_checks {
            config.checks = false;
        }
        config.validate()?;
    }
    Ok(config)
}

fn report_violations(report: &distq::harness::ExperimentReport) -> ExitCode {
    let count = report.violation_count();
    if count == 0 {
        return ExitCode::SUCCESS;
    }
    eprintln!("{count} invariant violation(s)");
    for (seed, v) in report.violations() {
        eprintln!(
            "  seed {seed}, step {}: {} ({:e} > {:e})",
            v.step,
            v.lemma.name(),
            v.value,
            v.bound
        );
    }
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides } => load(config, Some(overrides)).and_then(|c| {
            let report = run_experiment(&c)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            Ok(report_violations(&report))
        }),
        Command::Sweep {
            config,
            vary,
            values,
            overrides,
        } => load(config, Some(overrides)).and_then(|c| {
            let param: SweepParam = vary.parse()?;
            let report = sweep(&c, param, values, true)?;
            println!("{}", c.output_dir.join("summary.csv").display());
            let worst = report.reports.iter().map(report_violations).find(|code| *code != ExitCode::SUCCESS);
            Ok(worst.unwrap_or(ExitCode::SUCCESS))
        }),
        Command::Congestion { config, overrides } => load(config, Some(overrides)).and_then(|c| {
            let (report, policy) = run_congestion(&c)?;
            for run in &policy.runs {
                println!("seed {}: agents match value iteration: {}", run.seed, run.all_agents_match());
            }
            println!("{}", c.output_dir.join("policy_report.json").display());
            Ok(report_violations(&report))
        }),
        Command::Bounds { config, epsilon } => load(config, None).and_then(|c| {
            print!("{}", BoundsReport::new(&c, *epsilon)?);
            Ok(ExitCode::SUCCESS)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
