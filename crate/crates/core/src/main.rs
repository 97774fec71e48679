use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpbrem::accountant::per_client_reports;
use dpbrem::baselines::RuleKind;
use dpbrem::harness::{accountant_config, run_experiment, setup, sweep, ExperimentConfig, Grid, DEFAULT_MAX_POINTS};
use dpbrem::verify::{run_suite, SUITES};

/// Differentially private, Byzantine-robust federated learning simulator.
///
/// Config keys can be overridden with DPBREM__<SECTION>__<KEY>=value.
#[derive(Parser)]
#[command(name = "dpbrem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run { config: PathBuf },
    /// Run the Cartesian product of a parameter grid, e.g. "rule.record_bound=2,5;attack.kind=none,ipm".
    Sweep {
        config: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = DEFAULT_MAX_POINTS)]
        max_points: usize,
    },
    /// Print the per-client privacy table for a config.
    Accountant { config: PathBuf },
    /// Run a verification suite, or all of them.
    Verify { suite: String },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (summary, files) = run_experiment(&cfg)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
            eprintln!("metrics: {}", files.metrics.display());
        }
        Command::Sweep { config, grid, max_points } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = Grid::parse(&grid)?;
            let points = sweep(&cfg, &grid, max_points)?;
            for p in &points {
                let params: Vec<String> = p.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                writeln!(out, "{:>4}  {:<40}  final_accuracy={:.4}", p.index, params.join(" "), p.summary.final_accuracy)?;
            }
            eprintln!("index: {}", cfg.output.dir.join("index.csv").display());
        }
        Command::Accountant { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = setup(&cfg)?;
            if s.rule.kind != RuleKind::DpBrem {
                eprintln!("note: {} noise expressed as the dp_brem mechanism with the same multiplier", s.rule.kind);
            }
            let base = accountant_config(&cfg, &s.calibration);
            let clients: Vec<(f64, usize)> = s.clients.iter().map(|c| (c.p, c.data.len())).collect();
            writeln!(out, "{:>8} {:>8} {:>12} {:>12} {:>12} {:>12}", "p_i", "n_i", "S_i", "sigma_i", "mu_i", "epsilon_i")?;
            for ((p, n), r) in per_client_reports(&base, &clients)? {
                writeln!(out, "{p:>8} {n:>8} {:>12.6} {:>12.6} {:>12.6} {:>12.6}", r.sensitivity, r.sigma_eff, r.mu, r.epsilon)?;
            }
        }
        Command::Verify { suite } => {
            let names: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { vec![suite.as_str()] };
            let mut ok = true;
            for name in names {
                let report = run_suite(name)?;
                write!(out, "{report}")?;
                ok &= report.passed();
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
