use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rerrsim::harness::{emit, monte_carlo_loss_oracle, parse_config, run_scenario, Format, ScenarioConfig};

/// Environment variable naming the output directory when `--out` is absent.
const OUT_DIR_ENV: &str = "RERRSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "rerrsim",
    version,
    about = "Route-error propagation and loss-estimation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its report.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Also write the trial-0 event trace as TSV.
        #[arg(long)]
        trace: bool,
    },
    /// Parse and validate a scenario without running it.
    Validate { config: PathBuf },
    /// Compare empirical per-packet loss frequencies with the estimator.
    Oracle {
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        trials: u32,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(path: &Path) -> Result<ScenarioConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_config(&text).map_err(|errs| {
        errs.iter()
            .map(|e| format!("{}: {e}", path.display()))
            .collect::<Vec<_>>()
            .join("\n")
    })
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "{}: ok ({} nodes, {} links)",
                cfg.name,
                cfg.nodes.len(),
                cfg.links.len()
            );
            Ok(true)
        }
        Command::Run {
            config,
            seed,
            trials,
            out,
            format,
            trace,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(t) = trials {
                cfg.run.trials = t.max(1);
            }
            let dir = out_dir(out);
            let (events, report) = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let path = emit(&report, format, &dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            println!("wrote {}", path.display());
            if trace {
                let tpath = dir.join(format!("{}.trace.tsv", report.scenario));
                fs::write(&tpath, events.to_tsv()).map_err(|e| format!("{}: {e}", tpath.display()))?;
                println!("wrote {}", tpath.display());
            }
            println!(
                "delivery_ratio={} rerr_success={} app_duplicates={} unaccounted={} budget_violations={}",
                report.delivery_ratio,
                report.rerr_success,
                report.invariants.app_duplicates,
                report.invariants.unaccounted,
                report.invariants.budget_violations
            );
            Ok(report.invariants.ok())
        }
        Command::Oracle { config, trials, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let rep = monte_carlo_loss_oracle(&cfg, trials.max(1)).map_err(|e| e.to_string())?;
            println!("n\tempirical\testimate\tabs_diff");
            for (i, (e, a)) in rep.empirical.iter().zip(&rep.analytic).enumerate() {
                println!("{}\t{e:.4}\t{a:.4}\t{:.4}", i + 1, (e - a).abs());
            }
            println!(
                "trials={} with_rerr={} max_abs_diff={:.4}",
                rep.trials,
                rep.trials_with_rerr,
                rep.max_abs_error()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("invariant check failed");
            ExitCode::FAILURE
        }
        Err(msg) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
    }
}
