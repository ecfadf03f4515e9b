//! One simulation trial: protocol nodes plus the source application, driven by the engine.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::config::ScenarioConfig;
use crate::estimator::LossEstimate;
use crate::mdc::{receiver_report, EncodeLogEntry, Encoder, Frame, ReceiverReport};
use crate::packet::{Packet, PacketKind, RerrInfo};
use crate::routing::{Action, Ctx, LossReason, Node, RoutingTable, SentRecord};
use crate::sim::{Engine, Event, EventTrace, Handler, MulticastTree, Payload, SimError, Timer};
use crate::types::{Flow, IdGen, NodeId, PacketId, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub id: PacketId,
    pub at: SimTime,
    pub frame: u32,
}

/// End-to-end bookkeeping keyed by `(flow, seq, receiver)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub injected: BTreeMap<(Flow, u64), Injection>,
    /// First application delivery time.
    pub delivered: BTreeMap<(Flow, u64, NodeId), SimTime>,
    pub lost: BTreeMap<(Flow, u64, NodeId), LossReason>,
    pub app_duplicates: u64,
}

impl Ledger {
    pub fn is_delivered(&self, flow: Flow, seq: u64, receiver: NodeId) -> bool {
        self.delivered.contains_key(&(flow, seq, receiver))
    }

    pub fn delivered_origin_ids(&self, receiver: NodeId) -> BTreeSet<PacketId> {
        self.delivered
            .keys()
            .filter(|(_, _, r)| *r == receiver)
            .filter_map(|(f, s, _)| self.injected.get(&(*f, *s)).map(|i| i.id))
            .collect()
    }
}

/// How every `(injected packet, receiver)` pair ended at the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conservation {
    pub expected: u64,
    pub delivered: u64,
    pub marked_lost: u64,
    pub in_flight: u64,
    pub unaccounted: u64,
    /// Marked lost by some node yet delivered through another copy; counted as delivered.
    pub lost_but_delivered: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.unaccounted == 0 && self.delivered + self.marked_lost + self.in_flight == self.expected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerrArrival {
    pub at: SimTime,
    pub node: NodeId,
    pub info: RerrInfo,
    pub transit: SimTime,
    pub estimates: Vec<(PacketId, LossEstimate)>,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub trace: EventTrace,
    pub ledger: Ledger,
    pub conservation: Conservation,
    pub encode_log: Vec<EncodeLogEntry>,
    pub frames: Vec<Frame>,
    pub receiver_reports: BTreeMap<NodeId, ReceiverReport>,
    pub rerr_arrivals: Vec<RerrArrival>,
    /// Source send log per flow.
    pub sent: BTreeMap<Flow, Vec<SentRecord>>,
    /// Routing tables at the horizon.
    pub tables: BTreeMap<NodeId, RoutingTable>,
}

struct World<'c> {
    cfg: &'c ScenarioConfig,
    nodes: BTreeMap<NodeId, Node>,
    ids: IdGen,
    encoder: Encoder,
    flows: Vec<Flow>,
    pending: VecDeque<Packet>,
    ledger: Ledger,
    rerr_arrivals: Vec<RerrArrival>,
    tree: Option<MulticastTree>,
    /// Packets the source itself marked lost; estimates never lower these.
    source_lost: BTreeSet<PacketId>,
}

impl World<'_> {
    fn covered(&self, packet: &Packet, at: NodeId, toward: Option<NodeId>) -> Vec<NodeId> {
        if !packet.flow.is_multicast() {
            return vec![packet.flow.destination];
        }
        match &self.tree {
            Some(t) => t.leaves_under(toward.unwrap_or(at)),
            None => Vec::new(),
        }
    }

    fn inject_time(&self, index: u64) -> SimTime {
        let ppf = self.cfg.video.encoder.packets_per_frame as u64;
        let frame = index / ppf;
        let slot = index % ppf;
        self.cfg.video.start + self.cfg.video.frame_interval * frame + self.cfg.t_data() * slot
    }

    fn on_inject(&mut self, engine: &mut Engine, index: usize) -> Result<Vec<Action>, SimError> {
        let now = engine.now();
        let ppf = self.cfg.video.encoder.packets_per_frame;
        if index.is_multiple_of(ppf) {
            let packets = self.encoder.encode_and_dispatch(&self.flows, &mut self.ids, now);
            self.pending.extend(packets);
        }
        let next = index + 1;
        if (next / ppf) < self.cfg.video.frames as usize {
            let at = self.inject_time(next as u64).max(now);
            engine.schedule(at, self.cfg.source, Payload::Timer(Timer::Inject { index: next }))?;
        }
        let Some(mut packet) = self.pending.pop_front() else {
            return Ok(Vec::new());
        };
        packet.created_at = now;
        self.ledger.injected.insert(
            (packet.flow, packet.seq),
            Injection {
                id: packet.id,
                at: now,
                frame: packet.frame_id.unwrap_or(0),
            },
        );
        let node = self
            .nodes
            .get_mut(&self.cfg.source)
            .ok_or(SimError::UnknownNode(self.cfg.source))?;
        let mut ctx = Ctx::new(now, &mut self.ids);
        node.inject(&mut ctx, packet);
        Ok(ctx.out)
    }

    fn apply(&mut self, engine: &mut Engine, node: NodeId, actions: Vec<Action>) -> Result<(), SimError> {
        let now = engine.now();
        for action in actions {
            match action {
                Action::Send { to, packet } => {
                    engine.transmit(node, to, packet)?;
                }
                Action::SetTimer { at, timer } => {
                    engine.schedule(at, node, Payload::Timer(timer))?;
                }
                Action::Deliver { packet } => {
                    let key = (packet.flow, packet.seq, node);
                    match self.ledger.delivered.entry(key) {
                        Entry::Occupied(_) => self.ledger.app_duplicates += 1,
                        Entry::Vacant(e) => {
                            e.insert(now);
                        }
                    }
                }
                Action::Lost { packet, toward, reason } => {
                    for r in self.covered(&packet, node, toward) {
                        self.ledger.lost.entry((packet.flow, packet.seq, r)).or_insert(reason);
                    }
                    if node == self.cfg.source {
                        self.source_lost.insert(packet.origin_id);
                        self.encoder
                            .update_corruption(&[(packet.origin_id, 1.0)])
                            .expect("1.0 is a probability");
                    }
                }
                Action::Trace { kind, packet, detail } => engine.record(node, kind, packet, detail),
                Action::RerrArrived {
                    info,
                    transit,
                    estimates,
                } => {
                    let updates: Vec<(PacketId, f64)> = estimates
                        .iter()
                        .filter(|(id, _)| !self.source_lost.contains(id))
                        .map(|(id, e)| (*id, e.pr))
                        .collect();
                    self.encoder
                        .update_corruption(&updates)
                        .expect("estimates are probabilities");
                    self.rerr_arrivals.push(RerrArrival {
                        at: now,
                        node,
                        info,
                        transit,
                        estimates,
                    });
                }
            }
        }
        Ok(())
    }

    fn conservation(&self, engine: &Engine, receivers: &[NodeId]) -> Conservation {
        let mut in_flight: BTreeSet<(Flow, u64, NodeId)> = BTreeSet::new();
        for (&at, node) in &self.nodes {
            for (p, toward) in node.holdings() {
                for r in self.covered(p, at, toward) {
                    in_flight.insert((p.flow, p.seq, r));
                }
            }
        }
        for ev in engine.pending() {
            if let Payload::Arrival { packet, .. } = &ev.payload {
                if packet.kind == PacketKind::Data {
                    for r in self.covered(packet, ev.target, None) {
                        in_flight.insert((packet.flow, packet.seq, r));
                    }
                }
            }
        }
        let mut c = Conservation::default();
        for &(flow, seq) in self.ledger.injected.keys() {
            let targets: Vec<NodeId> = if flow.is_multicast() {
                receivers.to_vec()
            } else {
                vec![flow.destination]
            };
            for r in targets {
                let key = (flow, seq, r);
                c.expected += 1;
                if self.ledger.delivered.contains_key(&key) {
                    c.delivered += 1;
                    if self.ledger.lost.contains_key(&key) {
                        c.lost_but_delivered += 1;
                    }
                } else if self.ledger.lost.contains_key(&key) {
                    c.marked_lost += 1;
                } else if in_flight.contains(&key) {
                    c.in_flight += 1;
                } else {
                    c.unaccounted += 1;
                }
            }
        }
        c
    }
}

impl Handler for World<'_> {
    fn handle(&mut self, engine: &mut Engine, event: Event) -> Result<(), SimError> {
        let now = engine.now();
        let target = event.target;
        let actions = match event.payload {
            Payload::Timer(Timer::Inject { index }) => self.on_inject(engine, index)?,
            Payload::Timer(timer) => {
                let node = self.nodes.get_mut(&target).ok_or(SimError::UnknownNode(target))?;
                let mut ctx = Ctx::new(now, &mut self.ids);
                node.on_timer(&mut ctx, timer);
                ctx.out
            }
            Payload::Arrival { packet, from } => {
                let node = self.nodes.get_mut(&target).ok_or(SimError::UnknownNode(target))?;
                let mut ctx = Ctx::new(now, &mut self.ids);
                node.on_packet(&mut ctx, packet, from);
                ctx.out
            }
            Payload::LinkChange { .. } => Vec::new(),
        };
        self.apply(engine, target, actions)
    }
}

/// Run one trial of `cfg` with engine seed `seed`.
pub fn run_trial(cfg: &ScenarioConfig, seed: u64) -> Result<TrialOutcome, SimError> {
    let topo = cfg.topology()?;
    let mut engine = Engine::new(topo.clone(), seed);
    for d in &cfg.drops {
        engine.add_forced_drop(d.clone());
    }
    let proto = cfg.protocol();
    let mut nodes: BTreeMap<NodeId, Node> = topo
        .nodes()
        .map(|n| (n, Node::new(n, topo.neighbors(n), proto)))
        .collect();

    let flows = cfg.flows();
    for (&tag, route) in &cfg.paths {
        let flow = flows
            .iter()
            .copied()
            .find(|f| f.path == tag)
            .expect("one flow per path tag");
        for n in route {
            if let Some(node) = nodes.get_mut(n) {
                node.install_static_route(flow, route, SimTime::ZERO);
            }
        }
    }
    if let Some(src) = nodes.get_mut(&cfg.source) {
        for (&tag, routes) in &cfg.route_cache {
            if let Some(flow) = flows.iter().copied().find(|f| f.path == tag) {
                for r in routes {
                    src.cache_route(flow, r.clone());
                }
            }
        }
    }
    let tree = topo.multicast_tree().cloned();
    if let Some(t) = &tree {
        let flow = Flow::multicast(t.root);
        for (&id, node) in nodes.iter_mut() {
            if t.contains(id) {
                node.join_tree(flow, t.parent_of(id), t.children(id), SimTime::ZERO);
            }
        }
    }

    let mut world = World {
        cfg,
        nodes,
        ids: IdGen::new(),
        encoder: Encoder::new(cfg.video.encoder),
        flows,
        pending: VecDeque::new(),
        ledger: Ledger::default(),
        rerr_arrivals: Vec::new(),
        tree,
        source_lost: BTreeSet::new(),
    };
    if cfg.video.frames > 0 {
        engine.schedule(cfg.video.start, cfg.source, Payload::Timer(Timer::Inject { index: 0 }))?;
    }
    engine.run_until(cfg.run.horizon, &mut world)?;

    let receivers = cfg.receivers();
    let conservation = world.conservation(&engine, &receivers);
    let frames = world.encoder.frames().to_vec();
    let receiver_reports = receivers
        .iter()
        .map(|&r| (r, receiver_report(&frames, &world.ledger.delivered_origin_ids(r))))
        .collect();
    let sent = world
        .flows
        .iter()
        .map(|f| (*f, world.nodes[&cfg.source].sent_log(f).to_vec()))
        .collect();
    let tables = world.nodes.iter().map(|(id, n)| (*id, n.table().clone())).collect();
    Ok(TrialOutcome {
        seed,
        trace: engine.into_trace(),
        ledger: world.ledger,
        conservation,
        encode_log: world.encoder.log().to_vec(),
        frames,
        receiver_reports,
        rerr_arrivals: world.rerr_arrivals,
        sent,
        tables,
    })
}
