use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use super::oracle::OracleReport;
use super::world::{Conservation, RerrArrival, TrialOutcome};
use crate::mdc::{EncodeLogEntry, FrameStatus, ReceiverReport};
use crate::sim::{EventTrace, TraceKind};
use crate::types::{NodeId, PacketId};

pub const SCHEMA_VERSION: u32 = 1;

/// Transmissions per `(node, packet id)` found in a trace.
pub fn transmissions_per_id(trace: &EventTrace) -> BTreeMap<(NodeId, PacketId), u32> {
    let mut out = BTreeMap::new();
    for r in trace.of_kind(TraceKind::Tx) {
        if let Some(p) = r.packet {
            *out.entry((r.node, p)).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub seed: u64,
    pub delivery_ratio: f64,
    pub wire_duplicates: u64,
    pub app_duplicates: u64,
    pub rerr_generated: u64,
    pub rerr_delivered: u64,
    /// 1.0 when no RERR was generated.
    pub rerr_success: f64,
    pub rerr_stranded: u64,
    pub mean_delay_us: f64,
    pub max_delay_us: u64,
    pub frames_corrupted: u64,
    pub frames_total: u64,
    pub retransmissions: u64,
    pub timeouts: u64,
    pub max_tx_per_id: u32,
    pub budget_violations: u64,
    pub conservation: Conservation,
}

impl TrialMetrics {
    pub fn from_outcome(cfg: &ScenarioConfig, o: &TrialOutcome) -> Self {
        let c = o.conservation;
        let delays: Vec<u64> = o
            .ledger
            .delivered
            .iter()
            .filter_map(|((f, s, _), t)| {
                o.ledger
                    .injected
                    .get(&(*f, *s))
                    .map(|i| t.saturating_sub(i.at).as_micros())
            })
            .collect();
        let mean_delay_us = if delays.is_empty() {
            0.0
        } else {
            delays.iter().sum::<u64>() as f64 / delays.len() as f64
        };
        let tx = transmissions_per_id(&o.trace);
        let budget = cfg.max_retries + 1;
        let rerr_generated = o.trace.count(TraceKind::RerrGen) as u64;
        let rerr_delivered = o.rerr_arrivals.len() as u64;
        let (frames_corrupted, frames_total) = o
            .receiver_reports
            .values()
            .fold((0, 0), |(c, t), r| (c + r.corrupted as u64, t + r.status.len() as u64));
        TrialMetrics {
            seed: o.seed,
            delivery_ratio: if c.expected == 0 {
                1.0
            } else {
                c.delivered as f64 / c.expected as f64
            },
            wire_duplicates: o.trace.count(TraceKind::Dup) as u64,
            app_duplicates: o.ledger.app_duplicates,
            rerr_generated,
            rerr_delivered,
            rerr_success: if rerr_generated == 0 {
                1.0
            } else {
                rerr_delivered as f64 / rerr_generated as f64
            },
            rerr_stranded: o.trace.count(TraceKind::RerrStranded) as u64,
            mean_delay_us,
            max_delay_us: delays.iter().copied().max().unwrap_or(0),
            frames_corrupted,
            frames_total,
            retransmissions: o.trace.count(TraceKind::Retx) as u64,
            timeouts: o.trace.count(TraceKind::Timeout) as u64,
            max_tx_per_id: tx.values().copied().max().unwrap_or(0),
            budget_violations: tx.values().filter(|&&n| n > budget).count() as u64,
            conservation: c,
        }
    }

    pub fn invariants_hold(&self) -> bool {
        self.app_duplicates == 0 && self.conservation.holds() && self.budget_violations == 0
    }
}

/// Totals of the in-run invariant checks across all trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub app_duplicates: u64,
    pub unaccounted: u64,
    pub budget_violations: u64,
    pub conservation_failures: u64,
}

impl InvariantSummary {
    pub fn ok(&self) -> bool {
        *self == InvariantSummary::default()
    }
}

/// Scenario-level report: every scalar is the mean of the per-trial values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub trials: u32,
    pub delivery_ratio: f64,
    pub wire_duplicates: f64,
    pub app_duplicates: f64,
    pub rerr_success: f64,
    pub rerr_stranded: f64,
    pub mean_delay_us: f64,
    pub max_delay_us: f64,
    pub frames_corrupted: f64,
    pub frames_total: f64,
    pub invariants: InvariantSummary,
    /// Fraction of (trial, receiver) pairs in which each frame was corrupted.
    pub frame_corruption_freq: Vec<f64>,
    pub per_trial: Vec<TrialMetrics>,
    /// Encoder decisions, RERR estimates and receiver outcome of the first trial.
    pub encode_log: Vec<EncodeLogEntry>,
    pub rerr_arrivals: Vec<RerrArrival>,
    pub receiver_reports: Vec<(NodeId, ReceiverReport)>,
    pub loss_oracle: Option<OracleReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    /// Deterministic fold over per-trial metrics, in trial order.
    pub fn aggregate(
        cfg: &ScenarioConfig,
        per_trial: Vec<TrialMetrics>,
        frame_corrupted: &[Vec<bool>],
        first: Option<&TrialOutcome>,
    ) -> Self {
        let m = |f: fn(&TrialMetrics) -> f64| mean(per_trial.iter().map(f));
        let mut invariants = InvariantSummary::default();
        for t in &per_trial {
            invariants.app_duplicates += t.app_duplicates;
            invariants.unaccounted += t.conservation.unaccounted;
            invariants.budget_violations += t.budget_violations;
            invariants.conservation_failures += u64::from(!t.conservation.holds());
        }
        let frames = frame_corrupted.iter().map(Vec::len).max().unwrap_or(0);
        let frame_corruption_freq = (0..frames)
            .map(|i| {
                mean(
                    frame_corrupted
                        .iter()
                        .filter_map(|v| v.get(i))
                        .map(|&b| if b { 1.0 } else { 0.0 }),
                )
            })
            .collect();
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            scenario: cfg.name.clone(),
            seed: cfg.run.seed,
            trials: per_trial.len() as u32,
            delivery_ratio: m(|t| t.delivery_ratio),
            wire_duplicates: m(|t| t.wire_duplicates as f64),
            app_duplicates: m(|t| t.app_duplicates as f64),
            rerr_success: m(|t| t.rerr_success),
            rerr_stranded: m(|t| t.rerr_stranded as f64),
            mean_delay_us: m(|t| t.mean_delay_us),
            max_delay_us: m(|t| t.max_delay_us as f64),
            frames_corrupted: m(|t| t.frames_corrupted as f64),
            frames_total: m(|t| t.frames_total as f64),
            invariants,
            frame_corruption_freq,
            per_trial,
            encode_log: first.map(|o| o.encode_log.clone()).unwrap_or_default(),
            rerr_arrivals: first.map(|o| o.rerr_arrivals.clone()).unwrap_or_default(),
            receiver_reports: first
                .map(|o| o.receiver_reports.iter().map(|(n, r)| (*n, r.clone())).collect())
                .unwrap_or_default(),
            loss_oracle: None,
        }
    }
}

/// Per-frame corrupted flags, one vector per receiver.
pub fn frame_flags(o: &TrialOutcome) -> Vec<Vec<bool>> {
    o.receiver_reports
        .values()
        .map(|r| r.status.iter().map(|(_, s)| *s == FrameStatus::Corrupted).collect())
        .collect()
}
