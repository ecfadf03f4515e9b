//! Scenario configuration, trial orchestration, oracles and report emission.

pub mod config;
pub mod emit;
pub mod metrics;
pub mod oracle;
pub mod world;

use rayon::prelude::*;

pub use config::{parse_config, ConfigError, ScenarioConfig};
pub use emit::{emit, Format, CSV_COLUMNS};
pub use metrics::{MetricsReport, TrialMetrics};
pub use oracle::{monte_carlo_frame_corruption, monte_carlo_loss_oracle, OracleReport};
pub use world::{run_trial, Conservation, Ledger, TrialOutcome};

use crate::sim::{EventTrace, SimError};

/// Run every trial (trial `i` uses seed `run.seed + i`) and fold the results.
/// The returned trace is that of trial 0.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<(EventTrace, MetricsReport), SimError> {
    let results: Vec<(Option<TrialOutcome>, TrialMetrics, Vec<Vec<bool>>)> = (0..cfg.run.trials)
        .into_par_iter()
        .map(|i| {
            let o = run_trial(cfg, cfg.run.seed.wrapping_add(i as u64))?;
            let m = TrialMetrics::from_outcome(cfg, &o);
            let flags = metrics::frame_flags(&o);
            Ok((if i == 0 { Some(o) } else { None }, m, flags))
        })
        .collect::<Result<_, SimError>>()?;
    let mut first = None;
    let mut per_trial = Vec::with_capacity(results.len());
    let mut flags = Vec::new();
    for (o, m, f) in results {
        if o.is_some() {
            first = o;
        }
        per_trial.push(m);
        flags.extend(f);
    }
    let report = MetricsReport::aggregate(cfg, per_trial, &flags, first.as_ref());
    let trace = first.map(|o| o.trace).unwrap_or_default();
    Ok((trace, report))
}
