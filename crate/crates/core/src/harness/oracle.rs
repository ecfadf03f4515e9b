//! Monte Carlo references for the loss estimator and the frame corruption formula.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::world::run_trial;
use crate::estimator::{packet_loss_prob, t_delay, DelayDistribution};
use crate::sim::SimError;
use crate::types::{link_key, SimTime};

/// Stream reserved for oracle-side draws; link streams use small indices.
const ORACLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: u32,
    pub trials_with_rerr: u32,
    /// `empirical[n - 1]`: fraction of trials in which the n-th packet before the RERR was lost.
    pub empirical: Vec<f64>,
    /// Estimator output for a deterministic delay of `2 T_retrans + T_RERR`.
    pub analytic: Vec<f64>,
}

impl OracleReport {
    pub fn max_abs_error(&self) -> f64 {
        self.empirical
            .iter()
            .zip(&self.analytic)
            .map(|(e, a)| (e - a).abs())
            .fold(0.0, f64::max)
    }
}

/// Lost flags for the `max_n` packets preceding the first RERR at the source.
///
/// The packet named as the RERR trigger and packets sent after it count as lost
/// iff they never reached the receiver. Packets sent before the trigger were
/// delivered over a working link; their loss is a Bernoulli(λg) draw on top of
/// the physical outcome. Without any RERR the horizon is the reference point.
fn trial_losses(cfg: &ScenarioConfig, trial: u32) -> Result<(bool, Vec<bool>), SimError> {
    let seed = cfg.run.seed.wrapping_add(trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ORACLE_STREAM);

    let mut scenario = cfg.clone();
    if let Some(o) = cfg.oracle {
        let at = SimTime(rng.random_range(o.window.0.as_micros()..o.window.1.as_micros()));
        let key = link_key(o.link.0, o.link.1);
        if let Some(l) = scenario.links.iter_mut().find(|l| link_key(l.a, l.b) == key) {
            l.failures.push((at, SimTime::NEVER));
        }
    }
    let outcome = run_trial(&scenario, seed)?;
    let flow = cfg.flows()[0];
    let receiver = cfg.receivers().first().copied().unwrap_or(flow.destination);
    let first = outcome.rerr_arrivals.iter().find(|a| a.info.flow == flow);
    let reference = first.map_or(cfg.run.horizon, |a| a.at);
    let trigger = first.and_then(|a| a.info.trigger);
    let sent = outcome.sent.get(&flow).map(Vec::as_slice).unwrap_or(&[]);
    let trigger_seq = trigger.and_then(|t| sent.iter().find(|r| r.id == t).map(|r| r.seq));
    let max_n = cfg.oracle.map_or(8, |o| o.max_n);

    let mut lost = Vec::with_capacity(max_n);
    for rec in sent.iter().rev().filter(|r| r.at <= reference).take(max_n) {
        let delivered = outcome.ledger.is_delivered(flow, rec.seq, receiver);
        let draw = rng.random_bool(cfg.channel.lambda_g);
        let good = match trigger_seq {
            Some(ts) => rec.seq < ts,
            None => true,
        };
        lost.push(!delivered || (good && draw));
    }
    Ok((first.is_some(), lost))
}

pub fn monte_carlo_loss_oracle(cfg: &ScenarioConfig, trials: u32) -> Result<OracleReport, SimError> {
    let max_n = cfg.oracle.map_or(8, |o| o.max_n);
    let per_trial: Vec<(bool, Vec<bool>)> = (0..trials)
        .into_par_iter()
        .map(|i| trial_losses(cfg, i))
        .collect::<Result<_, _>>()?;
    let mut counts = vec![0u32; max_n];
    let mut seen = vec![0u32; max_n];
    for (_, lost) in &per_trial {
        for (i, &l) in lost.iter().enumerate() {
            seen[i] += 1;
            counts[i] += u32::from(l);
        }
    }
    let empirical = counts
        .iter()
        .zip(&seen)
        .map(|(&c, &s)| if s == 0 { 0.0 } else { c as f64 / s as f64 })
        .collect();
    let dist = DelayDistribution::Deterministic(t_delay(cfg.channel.t_retrans, cfg.channel.t_rerr));
    let analytic = (1..=max_n)
        .map(|n| packet_loss_prob(n, &cfg.channel, &dist).unwrap_or(f64::NAN))
        .collect();
    Ok(OracleReport {
        trials,
        trials_with_rerr: per_trial.iter().filter(|(r, _)| *r).count() as u32,
        empirical,
        analytic,
    })
}

/// Fraction of `trials` in which at least one packet of a frame is lost, with
/// packet `i` lost independently with probability `probs[i]`.
pub fn monte_carlo_frame_corruption(probs: &[f64], trials: u32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corrupted = 0u32;
    for _ in 0..trials {
        // Draw every packet so the stream position is independent of outcomes.
        let mut any = false;
        for &p in probs {
            any |= rng.random_bool(p);
        }
        corrupted += u32::from(any);
    }
    corrupted as f64 / trials as f64
}
