#![allow(dead_code)]

use std::collections::BTreeMap;

use rerrsim::harness::metrics::transmissions_per_id;
use rerrsim::harness::{parse_config, run_trial, ScenarioConfig, TrialOutcome};
use rerrsim::sim::{EventTrace, TraceKind};
use rerrsim::{NodeId, PacketId, SimTime};

pub fn scenario(text: &str) -> ScenarioConfig {
    match parse_config(text) {
        Ok(c) => c,
        Err(errs) => panic!("config rejected: {errs:?}"),
    }
}

pub fn run(cfg: &ScenarioConfig) -> TrialOutcome {
    run_trial(cfg, cfg.run.seed).expect("trial runs")
}

/// Value of `key=` inside a trace detail string.
pub fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
}

/// `(to, kind)` of every transmission by `node`.
pub fn sends_by(trace: &EventTrace, node: u32) -> Vec<(NodeId, String, PacketId, SimTime)> {
    trace
        .of_kind(TraceKind::Tx)
        .filter(|r| r.node == NodeId(node))
        .map(|r| {
            let to = detail_field(&r.detail, "to")
                .and_then(|v| v.parse().ok())
                .map(NodeId)
                .unwrap_or(NodeId(u32::MAX));
            let kind = r.detail.split_whitespace().nth(1).unwrap_or("").to_string();
            (to, kind, r.packet.unwrap_or(PacketId(u64::MAX)), r.time)
        })
        .collect()
}

/// Transmissions of a NACKed packet by its sender after the NACK was received.
pub fn post_nack_transmissions(trace: &EventTrace) -> usize {
    let recs = trace.records();
    let mut violations = 0;
    for (i, r) in recs.iter().enumerate() {
        if r.kind != TraceKind::Rx || !r.detail.contains(" NACK ") {
            continue;
        }
        let Some(of) = detail_field(&r.detail, "of").and_then(|v| v.parse::<u64>().ok()) else {
            continue;
        };
        let from = detail_field(&r.detail, "from").and_then(|v| v.parse::<u32>().ok());
        violations += recs[i + 1..]
            .iter()
            .filter(|t| {
                t.kind == TraceKind::Tx
                    && t.node == r.node
                    && t.packet == Some(PacketId(of))
                    && detail_field(&t.detail, "to").and_then(|v| v.parse::<u32>().ok()) == from
            })
            .count();
    }
    violations
}

/// Largest number of transmissions of one packet id by one node.
pub fn max_transmissions(trace: &EventTrace) -> u32 {
    transmissions_per_id(trace).values().copied().max().unwrap_or(0)
}

/// Application deliveries per `(flow, seq, receiver)` counted from the trace.
pub fn deliveries(trace: &EventTrace) -> BTreeMap<(NodeId, String, String), usize> {
    let mut out = BTreeMap::new();
    for r in trace.of_kind(TraceKind::Deliver) {
        let flow = detail_field(&r.detail, "flow").unwrap_or("").to_string();
        let seq = detail_field(&r.detail, "seq").unwrap_or("").to_string();
        *out.entry((r.node, flow, seq)).or_insert(0) += 1;
    }
    out
}

/// Invariants every scenario must satisfy.
pub fn assert_invariants(cfg: &ScenarioConfig, o: &TrialOutcome) {
    assert!(o.conservation.holds(), "conservation: {:?}", o.conservation);
    assert_eq!(o.ledger.app_duplicates, 0);
    assert!(max_transmissions(&o.trace) <= cfg.max_retries + 1, "budget exceeded");
    assert_eq!(post_nack_transmissions(&o.trace), 0);
    assert!(deliveries(&o.trace).values().all(|&c| c == 1));
}
