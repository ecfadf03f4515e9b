use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::topology::{FailureInterval, Topology};
use super::trace::{EventTrace, TraceKind, TraceRecord};
use super::SimError;
use crate::packet::{Packet, PacketKind};
use crate::types::{link_key, Flow, NodeId, PacketId, SimTime};

/// Timer payloads. Retransmission and discovery timers belong to the routing
/// layer; `Inject` drives the source application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Retransmit { packet: PacketId, neighbor: NodeId },
    Discovery { flow: Flow, discovery: u64 },
    Inject { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Arrival { packet: Packet, from: NodeId },
    Timer(Timer),
    LinkChange { link: (NodeId, NodeId), up: bool },
}

#[derive(Debug, Clone)]
pub struct Event {
    pub fire_at: SimTime,
    pub seq: u64,
    pub target: NodeId,
    pub payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.fire_at.cmp(&other.fire_at).then_with(|| self.seq.cmp(&other.seq))
    }
}

/// Deterministic fault injection: drop the `nth` (1-based) packet of `kind`
/// sent from `from` to `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedDrop {
    pub from: NodeId,
    pub to: NodeId,
    pub kind: PacketKind,
    pub nth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    LinkDown,
    Loss,
    Forced,
}

impl DropReason {
    fn as_str(self) -> &'static str {
        match self {
            DropReason::LinkDown => "link-down",
            DropReason::Loss => "loss",
            DropReason::Forced => "forced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxOutcome {
    Scheduled { arrive_at: SimTime },
    Dropped(DropReason),
}

/// Receives events popped by [`Engine::run_until`].
pub trait Handler {
    fn handle(&mut self, engine: &mut Engine, event: Event) -> Result<(), SimError>;
}

/// Handler that ignores every event; useful for driving the engine alone.
pub struct NoopHandler;

impl Handler for NoopHandler {
    fn handle(&mut self, _engine: &mut Engine, _event: Event) -> Result<(), SimError> {
        Ok(())
    }
}

/// Single-threaded discrete-event core: clock, queue, topology, per-link RNG and trace.
pub struct Engine {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Event>>,
    topology: Topology,
    link_rngs: Vec<ChaCha8Rng>,
    forced: Vec<ForcedDrop>,
    forced_seen: BTreeMap<(NodeId, NodeId, PacketKind), u32>,
    trace: EventTrace,
}

impl Engine {
    /// Every link draws losses from its own ChaCha stream derived from `seed`.
    pub fn new(topology: Topology, seed: u64) -> Self {
        let link_rngs = (0..topology.links().len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        let mut engine = Engine {
            clock: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            topology,
            link_rngs,
            forced: Vec::new(),
            forced_seen: BTreeMap::new(),
            trace: EventTrace::default(),
        };
        // Failure schedules declared on the topology get their boundary events now.
        let schedules: Vec<((NodeId, NodeId), Vec<FailureInterval>)> = engine
            .topology
            .links()
            .iter()
            .map(|l| (l.key(), l.failures().to_vec()))
            .collect();
        for (key, intervals) in schedules {
            for iv in intervals {
                engine.schedule_link_boundaries(key, iv);
            }
        }
        engine
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn trace(&self) -> &EventTrace {
        &self.trace
    }

    pub fn into_trace(self) -> EventTrace {
        self.trace
    }

    pub fn add_forced_drop(&mut self, rule: ForcedDrop) {
        self.forced.push(rule);
    }

    pub fn record(&mut self, node: NodeId, kind: TraceKind, packet: Option<PacketId>, detail: impl Into<String>) {
        self.trace.push(TraceRecord {
            time: self.clock,
            node,
            kind,
            packet,
            detail: detail.into(),
        });
    }

    /// Enqueue an event. Scheduling into the past is a programming error.
    pub fn schedule(&mut self, fire_at: SimTime, target: NodeId, payload: Payload) -> Result<u64, SimError> {
        if fire_at < self.clock {
            return Err(SimError::ScheduledInPast {
                at: fire_at,
                now: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event {
            fire_at,
            seq,
            target,
            payload,
        }));
        Ok(seq)
    }

    pub fn peek(&self) -> Option<&Event> {
        self.queue.peek().map(|Reverse(e)| e)
    }

    pub fn pending(&self) -> impl Iterator<Item = &Event> {
        self.queue.iter().map(|Reverse(e)| e)
    }

    /// Put `packet` on the link between `from` and `to` at the current clock.
    pub fn transmit(&mut self, from: NodeId, to: NodeId, packet: Packet) -> Result<TxOutcome, SimError> {
        let idx = self
            .topology
            .link_index(from, to)
            .ok_or(SimError::UnknownLink(link_key(from, to)))?;
        let now = self.clock;
        self.record(
            from,
            TraceKind::Tx,
            Some(packet.id),
            format!("to={to} {}", packet.summary()),
        );

        let link = &self.topology.links()[idx];
        let (delay, loss_rate, down) = (link.propagation_delay, link.loss_rate, link.is_down(now));

        let outcome = if down {
            TxOutcome::Dropped(DropReason::LinkDown)
        } else if self.forced_hit(from, to, packet.kind) {
            TxOutcome::Dropped(DropReason::Forced)
        } else if loss_rate > 0.0 && self.link_rngs[idx].random_bool(loss_rate) {
            TxOutcome::Dropped(DropReason::Loss)
        } else {
            TxOutcome::Scheduled { arrive_at: now + delay }
        };

        match outcome {
            TxOutcome::Dropped(reason) => {
                self.record(
                    from,
                    TraceKind::Drop,
                    Some(packet.id),
                    format!("to={to} {}", reason.as_str()),
                );
            }
            TxOutcome::Scheduled { arrive_at } => {
                self.schedule(arrive_at, to, Payload::Arrival { packet, from })?;
            }
        }
        Ok(outcome)
    }

    fn forced_hit(&mut self, from: NodeId, to: NodeId, kind: PacketKind) -> bool {
        if !self
            .forced
            .iter()
            .any(|r| r.from == from && r.to == to && r.kind == kind)
        {
            return false;
        }
        let count = self.forced_seen.entry((from, to, kind)).or_insert(0);
        *count += 1;
        let c = *count;
        self.forced
            .iter()
            .any(|r| r.from == from && r.to == to && r.kind == kind && r.nth == c)
    }

    /// Schedule an outage `[down_at, up_at)`; `up_at == SimTime::NEVER` is permanent.
    pub fn set_link_failure(&mut self, a: NodeId, b: NodeId, down_at: SimTime, up_at: SimTime) -> Result<(), SimError> {
        let idx = self
            .topology
            .link_index(a, b)
            .ok_or(SimError::UnknownLink(link_key(a, b)))?;
        if down_at < self.clock {
            return Err(SimError::ScheduledInPast {
                at: down_at,
                now: self.clock,
            });
        }
        let iv = FailureInterval { down_at, up_at };
        self.topology.link_mut(idx).add_failure(iv)?;
        self.schedule_link_boundaries(link_key(a, b), iv);
        Ok(())
    }

    fn schedule_link_boundaries(&mut self, key: (NodeId, NodeId), iv: FailureInterval) {
        // Boundaries at or after the current clock always schedule successfully.
        let _ = self.schedule(iv.down_at, key.0, Payload::LinkChange { link: key, up: false });
        if iv.up_at != SimTime::NEVER {
            let _ = self.schedule(iv.up_at, key.0, Payload::LinkChange { link: key, up: true });
        }
    }

    /// Process every event with `fire_at <= t_end` in `(fire_at, seq)` order.
    pub fn run_until<H: Handler>(&mut self, t_end: SimTime, handler: &mut H) -> Result<&EventTrace, SimError> {
        if t_end < self.clock {
            return Err(SimError::ScheduledInPast {
                at: t_end,
                now: self.clock,
            });
        }
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.fire_at > t_end {
                break;
            }
            let Reverse(event) = self.queue.pop().expect("peeked");
            debug_assert!(event.fire_at >= self.clock);
            self.clock = event.fire_at;
            match &event.payload {
                Payload::LinkChange { link, up } => {
                    let kind = if *up { TraceKind::LinkUp } else { TraceKind::LinkDown };
                    self.record(link.0, kind, None, format!("link={}-{}", link.0, link.1));
                    continue;
                }
                Payload::Arrival { packet, from } => {
                    let detail = format!("from={from} {}", packet.summary());
                    self.record(event.target, TraceKind::Rx, Some(packet.id), detail);
                }
                Payload::Timer(_) => {}
            }
            handler.handle(self, event)?;
        }
        self.clock = t_end;
        Ok(&self.trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::topology::Link;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    fn two_nodes(delay: u64, loss: f64) -> Topology {
        let mut t = Topology::new([n(0), n(1)]);
        t.add_link(Link::new(n(0), n(1), SimTime(delay), loss).unwrap())
            .unwrap();
        t
    }

    fn data(id: u64) -> Packet {
        Packet::data(PacketId(id), Flow::new(n(0), n(1), 0), id, 0, 0, SimTime::ZERO)
    }

    struct Collect(Vec<(SimTime, u64)>);
    impl Handler for Collect {
        fn handle(&mut self, _e: &mut Engine, ev: Event) -> Result<(), SimError> {
            self.0.push((ev.fire_at, ev.seq));
            Ok(())
        }
    }

    #[test]
    fn empty_queue_yields_empty_trace() {
        let mut e = Engine::new(two_nodes(2, 0.0), 1);
        let trace = e.run_until(SimTime(100), &mut NoopHandler).unwrap();
        assert!(trace.is_empty());
        assert_eq!(e.now(), SimTime(100));
    }

    #[test]
    fn schedule_orders_by_time_then_seq() {
        let mut e = Engine::new(two_nodes(2, 0.0), 1);
        e.schedule(SimTime(5), n(0), Payload::Timer(Timer::Inject { index: 0 }))
            .unwrap();
        assert_eq!(e.peek().unwrap().fire_at, SimTime(5));
        let s1 = e
            .schedule(SimTime(5), n(0), Payload::Timer(Timer::Inject { index: 1 }))
            .unwrap();
        let s0 = e
            .schedule(SimTime(3), n(0), Payload::Timer(Timer::Inject { index: 2 }))
            .unwrap();
        let mut h = Collect(Vec::new());
        e.run_until(SimTime(10), &mut h).unwrap();
        assert_eq!(h.0, vec![(SimTime(3), s0), (SimTime(5), 0), (SimTime(5), s1)]);
    }

    #[test]
    fn scheduling_into_past_is_an_error() {
        let mut e = Engine::new(two_nodes(2, 0.0), 1);
        e.run_until(SimTime(4), &mut NoopHandler).unwrap();
        let err = e.schedule(SimTime(3), n(0), Payload::Timer(Timer::Inject { index: 0 }));
        assert_eq!(
            err,
            Err(SimError::ScheduledInPast {
                at: SimTime(3),
                now: SimTime(4)
            })
        );
    }

    #[test]
    fn send_over_delay_two_link_arrives_at_two() {
        let mut e = Engine::new(two_nodes(2, 0.0), 1);
        let out = e.transmit(n(0), n(1), data(0)).unwrap();
        assert_eq!(out, TxOutcome::Scheduled { arrive_at: SimTime(2) });
        let trace = e.run_until(SimTime(10), &mut NoopHandler).unwrap();
        let kinds: Vec<_> = trace.iter().map(|r| (r.time, r.kind)).collect();
        assert_eq!(kinds, vec![(SimTime(0), TraceKind::Tx), (SimTime(2), TraceKind::Rx)]);
    }

    #[test]
    fn unknown_link_is_an_error() {
        let mut e = Engine::new(two_nodes(2, 0.0), 1);
        assert!(matches!(e.transmit(n(0), n(5), data(0)), Err(SimError::UnknownLink(_))));
    }

    #[test]
    fn link_failure_boundaries() {
        let mut e = Engine::new(two_nodes(1, 0.0), 1);
        e.set_link_failure(n(0), n(1), SimTime(10), SimTime(20)).unwrap();
        assert!(matches!(
            e.set_link_failure(n(0), n(1), SimTime(15), SimTime(25)),
            Err(SimError::OverlappingFailure { .. })
        ));
        e.run_until(SimTime(10), &mut NoopHandler).unwrap();
        assert_eq!(
            e.transmit(n(0), n(1), data(0)).unwrap(),
            TxOutcome::Dropped(DropReason::LinkDown)
        );
        e.run_until(SimTime(19), &mut NoopHandler).unwrap();
        assert_eq!(
            e.transmit(n(0), n(1), data(1)).unwrap(),
            TxOutcome::Dropped(DropReason::LinkDown)
        );
        e.run_until(SimTime(20), &mut NoopHandler).unwrap();
        assert_eq!(
            e.transmit(n(0), n(1), data(2)).unwrap(),
            TxOutcome::Scheduled { arrive_at: SimTime(21) }
        );
        let t = e.trace();
        assert_eq!(t.count(TraceKind::LinkDown), 1);
        assert_eq!(t.count(TraceKind::LinkUp), 1);
    }

    #[test]
    fn every_transmit_is_arrival_or_drop() {
        let mut e = Engine::new(two_nodes(1, 0.3), 9);
        for i in 0..500 {
            e.transmit(n(0), n(1), data(i)).unwrap();
        }
        e.run_until(SimTime(10), &mut NoopHandler).unwrap();
        let t = e.trace();
        assert_eq!(t.count(TraceKind::Tx), 500);
        assert_eq!(t.count(TraceKind::Rx) + t.count(TraceKind::Drop), 500);
    }

    #[test]
    fn empirical_loss_tracks_loss_rate() {
        // Monte Carlo frequency check: 10^4 Bernoulli(0.5) draws over one link.
        for seed in [1u64, 2, 3] {
            let mut e = Engine::new(two_nodes(1, 0.5), seed);
            let mut dropped = 0;
            for i in 0..10_000 {
                if let TxOutcome::Dropped(_) = e.transmit(n(0), n(1), data(i)).unwrap() {
                    dropped += 1;
                }
            }
            let frac = dropped as f64 / 10_000.0;
            assert!((frac - 0.5).abs() < 0.05, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn forced_drop_hits_only_nth() {
        let mut e = Engine::new(two_nodes(1, 0.0), 1);
        e.add_forced_drop(ForcedDrop {
            from: n(0),
            to: n(1),
            kind: PacketKind::Data,
            nth: 2,
        });
        let outs: Vec<_> = (0..3).map(|i| e.transmit(n(0), n(1), data(i)).unwrap()).collect();
        assert!(matches!(outs[0], TxOutcome::Scheduled { .. }));
        assert_eq!(outs[1], TxOutcome::Dropped(DropReason::Forced));
        assert!(matches!(outs[2], TxOutcome::Scheduled { .. }));
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let mut e = Engine::new(two_nodes(3, 0.4), seed);
            for i in 0..200 {
                e.transmit(n(0), n(1), data(i)).unwrap();
            }
            e.run_until(SimTime(50), &mut NoopHandler).unwrap().to_tsv()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
