use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::table::{RoutingEntry, RoutingTable};
use super::{Action, Ctx, LossReason, ProtocolConfig};
use crate::estimator::{loss_estimate, t_delay, LossEstimate, RerrDelayRecorder};
use crate::packet::{Packet, PacketKind, RerrInfo};
use crate::sim::{Timer, TraceKind};
use crate::types::{link_key, Flow, NodeId, PacketId, SimTime};

/// Link status toward one neighbor as seen by this node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NeighborState {
    Up,
    /// A packet timed out; only `probe` is transmitted until the neighbor answers.
    Suspect {
        probe: PacketId,
    },
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentRecord {
    pub id: PacketId,
    pub seq: u64,
    pub at: SimTime,
}

#[derive(Debug, Clone)]
struct Inflight {
    packet: Packet,
    deadline: SimTime,
}

#[derive(Debug, Clone, Copy)]
struct Discovery {
    id: u64,
    attempts: u32,
}

enum SendOutcome {
    Sent,
    Deferred,
    Refused(Packet),
}

/// Protocol state of a single node.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    neighbors: Vec<NodeId>,
    cfg: ProtocolConfig,
    table: RoutingTable,
    tree_children: Vec<NodeId>,
    in_tree: bool,

    link_state: BTreeMap<NodeId, NeighborState>,
    inflight: BTreeMap<(PacketId, NodeId), Inflight>,
    tx_count: BTreeMap<PacketId, u32>,
    deferred: BTreeMap<NodeId, VecDeque<Packet>>,
    held: BTreeMap<Flow, VecDeque<Packet>>,

    seen_data: BTreeSet<(Flow, u64)>,
    seen_rerr_hops: BTreeSet<PacketId>,
    seen_rreq: BTreeSet<(NodeId, u64)>,
    discovery: BTreeMap<Flow, Discovery>,
    suspended: BTreeMap<Flow, SimTime>,

    // Source-only state.
    current_route: BTreeMap<Flow, Vec<NodeId>>,
    route_cache: BTreeMap<Flow, Vec<Vec<NodeId>>>,
    known_broken: BTreeSet<(NodeId, NodeId)>,
    recovering: BTreeSet<Flow>,
    sent_log: BTreeMap<Flow, Vec<SentRecord>>,
    handled_rerr: BTreeSet<u64>,
    delays: RerrDelayRecorder,
}

fn route_uses(route: &[NodeId], link: (NodeId, NodeId)) -> bool {
    let want = link_key(link.0, link.1);
    route.windows(2).any(|w| link_key(w[0], w[1]) == want)
}

impl Node {
    pub fn new(id: NodeId, mut neighbors: Vec<NodeId>, cfg: ProtocolConfig) -> Self {
        neighbors.sort();
        neighbors.dedup();
        Node {
            id,
            neighbors,
            cfg,
            table: RoutingTable::default(),
            tree_children: Vec::new(),
            in_tree: false,
            link_state: BTreeMap::new(),
            inflight: BTreeMap::new(),
            tx_count: BTreeMap::new(),
            deferred: BTreeMap::new(),
            held: BTreeMap::new(),
            seen_data: BTreeSet::new(),
            seen_rerr_hops: BTreeSet::new(),
            seen_rreq: BTreeSet::new(),
            discovery: BTreeMap::new(),
            suspended: BTreeMap::new(),
            current_route: BTreeMap::new(),
            route_cache: BTreeMap::new(),
            known_broken: BTreeSet::new(),
            recovering: BTreeSet::new(),
            sent_log: BTreeMap::new(),
            handled_rerr: BTreeSet::new(),
            delays: RerrDelayRecorder::default(),
        }
    }

    pub fn table(&self) -> &RoutingTable {
        &self.table
    }

    pub fn neighbor_state(&self, nb: NodeId) -> NeighborState {
        self.link_state.get(&nb).copied().unwrap_or(NeighborState::Up)
    }

    pub fn rerr_delays(&self) -> &RerrDelayRecorder {
        &self.delays
    }

    pub fn sent_log(&self, flow: &Flow) -> &[SentRecord] {
        self.sent_log.get(flow).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn current_route(&self, flow: &Flow) -> Option<&[NodeId]> {
        self.current_route.get(flow).map(Vec::as_slice)
    }

    pub fn is_recovering(&self, flow: &Flow) -> bool {
        self.recovering.contains(flow)
    }

    /// Install this node's entry for a statically provisioned route. A source
    /// also adopts the route as current and caches it for later recovery.
    pub fn install_static_route(&mut self, flow: Flow, route: &[NodeId], now: SimTime) {
        let Some(i) = route.iter().position(|&n| n == self.id) else {
            return;
        };
        let prev = if i > 0 { Some(route[i - 1]) } else { None };
        let next = route.get(i + 1).copied();
        self.table.install(RoutingEntry {
            key: flow,
            next_hop: next,
            prev_hop: prev,
            stamp: now,
        });
        if i == 0 && flow.source == self.id {
            self.current_route.insert(flow, route.to_vec());
            self.cache_route(flow, route.to_vec());
        }
    }

    /// Record an alternate route the source may switch to without discovery.
    pub fn cache_route(&mut self, flow: Flow, route: Vec<NodeId>) {
        let cache = self.route_cache.entry(flow).or_default();
        if !cache.contains(&route) {
            cache.push(route);
        }
    }

    /// Join the multicast tree rooted at `flow.source`.
    pub fn join_tree(&mut self, flow: Flow, parent: Option<NodeId>, children: Vec<NodeId>, now: SimTime) {
        self.in_tree = true;
        self.tree_children = children;
        self.tree_children.sort();
        self.table.install(RoutingEntry {
            key: flow,
            next_hop: None,
            prev_hop: parent,
            stamp: now,
        });
    }

    /// DATA packets this node is responsible for, with the neighbor each is headed to.
    pub fn holdings(&self) -> Vec<(&Packet, Option<NodeId>)> {
        let mut out: Vec<(&Packet, Option<NodeId>)> = Vec::new();
        for ((_, nb), inf) in &self.inflight {
            out.push((&inf.packet, Some(*nb)));
        }
        for (nb, q) in &self.deferred {
            out.extend(q.iter().map(|p| (p, Some(*nb))));
        }
        for q in self.held.values() {
            out.extend(q.iter().map(|p| (p, None)));
        }
        out.retain(|(p, _)| p.kind == PacketKind::Data);
        out
    }

    /// Transmissions of `id` made by this node so far.
    pub fn transmissions(&self, id: PacketId) -> u32 {
        self.tx_count.get(&id).copied().unwrap_or(0)
    }

    // ---- entry points -------------------------------------------------------

    pub fn on_packet(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        match packet.kind {
            PacketKind::Data if packet.flow.is_multicast() => self.on_multicast_receive(ctx, packet, from),
            PacketKind::Data => self.on_data_receive(ctx, packet, from),
            PacketKind::Ack => self.on_ack(ctx, &packet, from),
            PacketKind::Nack => self.on_nack(ctx, &packet, from),
            PacketKind::Rerr => self.on_rerr(ctx, packet, from),
            PacketKind::Rreq => self.on_rreq(ctx, packet, from),
            PacketKind::Rrep => self.on_rrep(ctx, packet, from),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Retransmit { packet, neighbor } => self.on_timeout(ctx, packet, neighbor),
            Timer::Discovery { flow, discovery } => self.on_discovery_timeout(ctx, flow, discovery),
            Timer::Inject { .. } => {}
        }
    }

    /// Source application hands over a fresh DATA packet.
    pub fn inject(&mut self, ctx: &mut Ctx, mut packet: Packet) {
        let flow = packet.flow;
        self.sent_log.entry(flow).or_default().push(SentRecord {
            id: packet.id,
            seq: packet.seq,
            at: ctx.now,
        });
        ctx.trace(TraceKind::Inject, Some(packet.id), packet.summary());
        if flow.is_multicast() {
            self.seen_data.insert((flow, packet.seq));
            self.forward_multicast(ctx, packet);
            return;
        }
        if self.recovering.contains(&flow) {
            self.lost(ctx, packet, None, LossReason::Recovery);
            return;
        }
        if self.is_suspended(&flow, ctx.now) {
            self.lost(ctx, packet, None, LossReason::Suspended);
            return;
        }
        if let Some(route) = self.current_route.get(&flow) {
            packet.route = route.clone();
        }
        self.forward_data(ctx, packet, None);
    }

    // ---- reliable transmission ---------------------------------------------

    fn send_reliable(&mut self, ctx: &mut Ctx, to: NodeId, packet: Packet) -> SendOutcome {
        match self.neighbor_state(to) {
            NeighborState::Failed => return SendOutcome::Refused(packet),
            NeighborState::Suspect { .. } => {
                ctx.trace(TraceKind::Defer, Some(packet.id), format!("to={to}"));
                self.deferred.entry(to).or_default().push_back(packet);
                return SendOutcome::Deferred;
            }
            NeighborState::Up => {}
        }
        let count = self.tx_count.entry(packet.id).or_insert(0);
        if *count > self.cfg.max_retries {
            return SendOutcome::Refused(packet);
        }
        *count += 1;
        let deadline = ctx.now + self.cfg.t_retrans;
        ctx.out.push(Action::Send {
            to,
            packet: packet.clone(),
        });
        ctx.out.push(Action::SetTimer {
            at: deadline,
            timer: Timer::Retransmit {
                packet: packet.id,
                neighbor: to,
            },
        });
        self.inflight.insert((packet.id, to), Inflight { packet, deadline });
        SendOutcome::Sent
    }

    fn send_unreliable(&mut self, ctx: &mut Ctx, to: NodeId, packet: Packet) {
        ctx.out.push(Action::Send { to, packet });
    }

    /// Any packet from `nb` proves the link works: clear suspicion and release deferred traffic.
    fn mark_alive(&mut self, ctx: &mut Ctx, nb: NodeId) {
        if self.neighbor_state(nb) == NeighborState::Up {
            return;
        }
        self.link_state.insert(nb, NeighborState::Up);
        self.known_broken.remove(&link_key(self.id, nb));
        let queued: Vec<Packet> = self.deferred.remove(&nb).map(Vec::from).unwrap_or_default();
        for p in queued {
            self.resend(ctx, nb, p);
        }
    }

    /// Re-offer a packet to `nb`; on refusal route it as if freshly received.
    fn resend(&mut self, ctx: &mut Ctx, nb: NodeId, packet: Packet) {
        if let SendOutcome::Refused(p) = self.send_reliable(ctx, nb, packet) {
            self.reroute(ctx, p, nb);
        }
    }

    fn on_ack(&mut self, ctx: &mut Ctx, ack: &Packet, from: NodeId) {
        if let Some(of) = ack.ack_of {
            self.inflight.remove(&(of, from));
            self.forget_queued(of);
        }
        self.mark_alive(ctx, from);
    }

    fn on_nack(&mut self, ctx: &mut Ctx, nack: &Packet, from: NodeId) {
        if let Some(of) = nack.ack_of {
            let was_inflight = self.inflight.remove(&(of, from)).is_some();
            if self.forget_queued(of) || was_inflight {
                ctx.trace(TraceKind::NackStop, Some(of), format!("from={from}"));
            }
        }
        self.mark_alive(ctx, from);
    }

    /// The acknowledging neighbor holds `id`; drop any copy still waiting here,
    /// including one a reroute moved into a deferred or held queue.
    fn forget_queued(&mut self, id: PacketId) -> bool {
        let mut found = false;
        for q in self.deferred.values_mut().chain(self.held.values_mut()) {
            let before = q.len();
            q.retain(|p| p.id != id);
            found |= q.len() != before;
        }
        found
    }

    fn on_timeout(&mut self, ctx: &mut Ctx, id: PacketId, nb: NodeId) {
        match self.inflight.get(&(id, nb)) {
            Some(inf) if inf.deadline == ctx.now => {}
            _ => return,
        }
        ctx.trace(TraceKind::Timeout, Some(id), format!("to={nb}"));
        match self.neighbor_state(nb) {
            NeighborState::Up => {
                self.link_state.insert(nb, NeighborState::Suspect { probe: id });
            }
            NeighborState::Suspect { probe } if probe != id => {
                let inf = self.inflight.remove(&(id, nb)).expect("checked above");
                ctx.trace(TraceKind::Defer, Some(id), format!("to={nb}"));
                self.deferred.entry(nb).or_default().push_back(inf.packet);
                return;
            }
            NeighborState::Suspect { .. } => {}
            NeighborState::Failed => {
                let inf = self.inflight.remove(&(id, nb)).expect("checked above");
                self.reroute(ctx, inf.packet, nb);
                return;
            }
        }
        let count = self.transmissions(id);
        if count <= self.cfg.max_retries {
            *self.tx_count.entry(id).or_insert(0) += 1;
            let deadline = ctx.now + self.cfg.t_retrans;
            let inf = self.inflight.get_mut(&(id, nb)).expect("checked above");
            inf.deadline = deadline;
            let packet = inf.packet.clone();
            ctx.trace(TraceKind::Retx, Some(id), format!("to={nb} attempt={}", count + 1));
            ctx.out.push(Action::Send { to: nb, packet });
            ctx.out.push(Action::SetTimer {
                at: deadline,
                timer: Timer::Retransmit {
                    packet: id,
                    neighbor: nb,
                },
            });
        } else {
            let inf = self.inflight.remove(&(id, nb)).expect("checked above");
            self.declare_failed(ctx, nb, inf.packet);
        }
    }

    /// The probe toward `nb` exhausted its budget: the link is dead.
    fn declare_failed(&mut self, ctx: &mut Ctx, nb: NodeId, trigger: Packet) {
        self.link_state.insert(nb, NeighborState::Failed);
        self.known_broken.insert(link_key(self.id, nb));
        ctx.trace(TraceKind::LinkFailed, Some(trigger.id), format!("neighbor={nb}"));

        let keys: Vec<(PacketId, NodeId)> = self.inflight.keys().filter(|(_, n)| *n == nb).copied().collect();
        let mut stranded: Vec<Packet> = keys
            .into_iter()
            .filter_map(|k| self.inflight.remove(&k).map(|i| i.packet))
            .collect();
        stranded.extend(self.deferred.remove(&nb).into_iter().flatten());

        let trigger_id = match trigger.kind {
            PacketKind::Data => Some(trigger.origin_id),
            _ => None,
        };
        let trigger_flow = trigger.flow;
        let trigger_rerr = match trigger.kind {
            PacketKind::Data => {
                self.lost(ctx, trigger, Some(nb), LossReason::RetriesExhausted);
                None
            }
            PacketKind::Rerr => Some(trigger),
            _ => None,
        };

        let mut affected = self.table.flows_via(nb);
        for flow in &affected {
            if let Some(e) = self.table.get_mut(flow) {
                e.next_hop = None;
                e.stamp = ctx.now;
            }
        }
        if self.in_tree && self.tree_children.contains(&nb) {
            if let Some(e) = self.table.iter().find(|e| e.key.is_multicast()) {
                affected.push(e.key);
            }
        }
        for flow in affected {
            let trig = if flow == trigger_flow { trigger_id } else { None };
            self.generate_rerr(ctx, (self.id, nb), flow, trig);
        }

        for p in stranded {
            self.reroute(ctx, p, nb);
        }
        if let Some(p) = trigger_rerr {
            if let Some(info) = p.rerr {
                self.relay_rerr(ctx, info, &[nb]);
            }
        }
    }

    /// A packet could not go to `nb`; find it another way or account for it.
    fn reroute(&mut self, ctx: &mut Ctx, packet: Packet, nb: NodeId) {
        match packet.kind {
            PacketKind::Data if packet.flow.is_multicast() => {
                self.lost(ctx, packet, Some(nb), LossReason::SubtreeUnreachable);
            }
            PacketKind::Data => {
                if self.transmissions(packet.id) > self.cfg.max_retries {
                    self.lost(ctx, packet, Some(nb), LossReason::Budget);
                } else {
                    self.forward_data(ctx, packet, None);
                }
            }
            PacketKind::Rerr => {
                if let Some(info) = packet.rerr {
                    self.relay_rerr(ctx, info, &[nb]);
                }
            }
            _ => {}
        }
    }

    fn lost(&mut self, ctx: &mut Ctx, packet: Packet, toward: Option<NodeId>, reason: LossReason) {
        if packet.kind != PacketKind::Data {
            return;
        }
        ctx.trace(
            TraceKind::Lost,
            Some(packet.id),
            format!("{} {}", reason.as_str(), packet.summary()),
        );
        ctx.out.push(Action::Lost { packet, toward, reason });
    }

    // ---- unicast DATA -------------------------------------------------------

    fn on_data_receive(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        self.mark_alive(ctx, from);
        if !self.seen_data.insert((packet.flow, packet.seq)) {
            ctx.trace(TraceKind::Dup, Some(packet.id), format!("from={from}"));
            let nack = Packet::nack(ctx.ids.packet(), &packet, ctx.now);
            self.send_unreliable(ctx, from, nack);
            return;
        }
        let ack = Packet::ack(ctx.ids.packet(), &packet, ctx.now);
        self.send_unreliable(ctx, from, ack);
        if packet.flow.destination == self.id {
            self.deliver(ctx, packet);
            return;
        }
        self.install_from_header(ctx, &packet);
        self.forward_data(ctx, packet, Some(from));
    }

    fn deliver(&mut self, ctx: &mut Ctx, packet: Packet) {
        ctx.trace(TraceKind::Deliver, Some(packet.id), packet.summary());
        ctx.out.push(Action::Deliver { packet });
    }

    /// Adopt the source's current route from the DATA header when it names this node.
    fn install_from_header(&mut self, ctx: &mut Ctx, packet: &Packet) {
        if packet.flow.source == self.id {
            return;
        }
        let route = &packet.route;
        let Some(i) = route.iter().position(|&n| n == self.id) else {
            return;
        };
        let Some(&next) = route.get(i + 1) else {
            return;
        };
        if self.neighbor_state(next) == NeighborState::Failed || !self.neighbors.contains(&next) {
            return;
        }
        let prev = if i > 0 { Some(route[i - 1]) } else { None };
        let same = self
            .table
            .get(&packet.flow)
            .is_some_and(|e| e.next_hop == Some(next) && e.prev_hop == prev);
        if !same {
            self.table.install(RoutingEntry {
                key: packet.flow,
                next_hop: Some(next),
                prev_hop: prev,
                stamp: ctx.now,
            });
            ctx.trace(
                TraceKind::RouteInstalled,
                Some(packet.id),
                format!("flow={} header", packet.flow),
            );
        }
    }

    /// Forward along the table; without a usable next hop the packet is held
    /// and discovery starts. Never bounces a packet straight back to `from`.
    fn forward_data(&mut self, ctx: &mut Ctx, packet: Packet, from: Option<NodeId>) {
        let next = self
            .table
            .get(&packet.flow)
            .and_then(|e| e.next_hop)
            .filter(|nb| self.neighbor_state(*nb) != NeighborState::Failed && Some(*nb) != from);
        match next {
            Some(nb) => match self.send_reliable(ctx, nb, packet) {
                SendOutcome::Sent | SendOutcome::Deferred => {}
                SendOutcome::Refused(p) => {
                    if self.transmissions(p.id) > self.cfg.max_retries {
                        self.lost(ctx, p, Some(nb), LossReason::Budget);
                    } else {
                        self.hold(ctx, p);
                    }
                }
            },
            None => self.hold(ctx, packet),
        }
    }

    fn hold(&mut self, ctx: &mut Ctx, packet: Packet) {
        let flow = packet.flow;
        if flow.source == self.id && self.recovering.contains(&flow) {
            self.lost(ctx, packet, None, LossReason::Recovery);
            return;
        }
        if self.is_suspended(&flow, ctx.now) {
            self.lost(ctx, packet, None, LossReason::Suspended);
            return;
        }
        ctx.trace(TraceKind::Hold, Some(packet.id), packet.summary());
        self.held.entry(flow).or_default().push_back(packet);
        self.route_discovery(ctx, flow);
    }

    fn is_suspended(&mut self, flow: &Flow, now: SimTime) -> bool {
        match self.suspended.get(flow) {
            Some(&until) if now < until => true,
            Some(_) => {
                self.suspended.remove(flow);
                false
            }
            None => false,
        }
    }

    // ---- multicast ----------------------------------------------------------

    fn on_multicast_receive(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        self.mark_alive(ctx, from);
        if !self.seen_data.insert((packet.flow, packet.seq)) {
            ctx.trace(TraceKind::Dup, Some(packet.id), format!("from={from}"));
            let nack = Packet::nack(ctx.ids.packet(), &packet, ctx.now);
            self.send_unreliable(ctx, from, nack);
            return;
        }
        let ack = Packet::ack(ctx.ids.packet(), &packet, ctx.now);
        self.send_unreliable(ctx, from, ack);
        if self.tree_children.is_empty() {
            self.deliver(ctx, packet);
        } else {
            self.forward_multicast(ctx, packet);
        }
    }

    /// One copy per child, each with its own id so per-id budgets stay per link.
    fn forward_multicast(&mut self, ctx: &mut Ctx, packet: Packet) {
        for c in self.tree_children.clone() {
            let mut copy = packet.clone();
            copy.id = ctx.ids.packet();
            if let SendOutcome::Refused(p) = self.send_reliable(ctx, c, copy) {
                self.lost(ctx, p, Some(c), LossReason::SubtreeUnreachable);
            }
        }
    }

    // ---- route errors -------------------------------------------------------

    fn generate_rerr(&mut self, ctx: &mut Ctx, broken: (NodeId, NodeId), flow: Flow, trigger: Option<PacketId>) {
        let info = RerrInfo {
            id: ctx.ids.next_u64(),
            broken_link: broken,
            origin: self.id,
            target_source: flow.source,
            detected_at: ctx.now,
            flow,
            trigger,
            visited: vec![self.id],
        };
        ctx.trace(
            TraceKind::RerrGen,
            trigger,
            format!("rerr={} flow={flow} link={}-{}", info.id, broken.0, broken.1),
        );
        if flow.source == self.id {
            self.on_rerr_at_source(ctx, info);
        } else {
            self.relay_rerr(ctx, info, &[broken.1]);
        }
    }

    fn on_rerr(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        self.mark_alive(ctx, from);
        if !self.seen_rerr_hops.insert(packet.id) {
            ctx.trace(TraceKind::Dup, Some(packet.id), format!("from={from}"));
            let nack = Packet::nack(ctx.ids.packet(), &packet, ctx.now);
            self.send_unreliable(ctx, from, nack);
            return;
        }
        let ack = Packet::ack(ctx.ids.packet(), &packet, ctx.now);
        self.send_unreliable(ctx, from, ack);
        let Some(info) = packet.rerr else {
            return;
        };
        if info.target_source == self.id {
            self.on_rerr_at_source(ctx, info);
        } else {
            self.relay_rerr(ctx, info, &[from]);
        }
    }

    /// Send the report one hop closer to its source: the flow's previous hop if
    /// usable, else the lowest-id neighbor leading toward the source. Stranded otherwise.
    fn relay_rerr(&mut self, ctx: &mut Ctx, mut info: RerrInfo, exclude: &[NodeId]) {
        if !info.visited.contains(&self.id) {
            info.visited.push(self.id);
        }
        let usable = |node: &Node, nb: NodeId| {
            nb != node.id
                && node.neighbor_state(nb) != NeighborState::Failed
                && !exclude.contains(&nb)
                && !info.visited.contains(&nb)
                && node.neighbors.contains(&nb)
        };
        let primary = self
            .table
            .get(&info.flow)
            .and_then(|e| e.prev_hop)
            .filter(|&nb| usable(self, nb));
        let next = primary.or_else(|| {
            self.table
                .neighbors_toward(info.target_source)
                .into_iter()
                .find(|&nb| usable(self, nb))
        });
        let Some(nb) = next else {
            ctx.trace(
                TraceKind::RerrStranded,
                info.trigger,
                format!("rerr={} origin={} flow={}", info.id, info.origin, info.flow),
            );
            return;
        };
        let detail = format!("rerr={} origin={} to={nb}", info.id, info.origin);
        let packet = Packet::rerr(ctx.ids.packet(), info, ctx.now);
        if primary.is_none() {
            ctx.trace(TraceKind::RerrDetour, Some(packet.id), detail.clone());
        }
        ctx.trace(TraceKind::RerrFwd, Some(packet.id), detail);
        if let SendOutcome::Refused(p) = self.send_reliable(ctx, nb, packet) {
            if let Some(info) = p.rerr {
                let mut ex = exclude.to_vec();
                ex.push(nb);
                self.relay_rerr(ctx, info, &ex);
            }
        }
    }

    /// Source reaction: record the delay sample, re-estimate recent packets,
    /// switch to a cached route or rediscover, then report to the encoder.
    fn on_rerr_at_source(&mut self, ctx: &mut Ctx, info: RerrInfo) {
        if !self.handled_rerr.insert(info.id) {
            return;
        }
        let flow = info.flow;
        let transit = ctx.now.saturating_sub(info.detected_at);
        ctx.trace(
            TraceKind::RerrAtSource,
            info.trigger,
            format!(
                "rerr={} origin={} link={}-{} transit_us={}",
                info.id,
                info.origin,
                info.broken_link.0,
                info.broken_link.1,
                transit.as_micros()
            ),
        );
        self.known_broken
            .insert(link_key(info.broken_link.0, info.broken_link.1));
        self.delays.record_rerr_delay(t_delay(self.cfg.t_retrans, transit));

        let mut estimates: Vec<(PacketId, LossEstimate)> = Vec::new();
        if let Some(dist) = self.delays.empirical_dist() {
            let recent = self.sent_log.get(&flow).map(Vec::as_slice).unwrap_or(&[]);
            for (k, rec) in recent
                .iter()
                .rev()
                .filter(|r| r.at <= ctx.now)
                .take(self.cfg.estimate_window)
                .enumerate()
            {
                if let Ok(est) = loss_estimate(k + 1, &self.cfg.channel, &dist) {
                    estimates.push((rec.id, est));
                }
            }
        }
        let summary: Vec<String> = estimates
            .iter()
            .map(|(id, e)| format!("{}:{:.3}", id.0, e.pr))
            .collect();
        ctx.trace(TraceKind::Estimate, info.trigger, summary.join(" "));

        if !flow.is_multicast() {
            self.recover_route(ctx, flow);
        }
        ctx.out.push(Action::RerrArrived {
            info,
            transit,
            estimates,
        });
    }

    fn recover_route(&mut self, ctx: &mut Ctx, flow: Flow) {
        if self.recovering.contains(&flow) {
            return;
        }
        let current_ok = self.current_route.get(&flow).is_some_and(|r| !self.route_is_broken(r))
            && self.table.get(&flow).is_some_and(|e| e.next_hop.is_some());
        if current_ok {
            return;
        }
        let cached = self
            .route_cache
            .get(&flow)
            .and_then(|routes| routes.iter().find(|r| !self.route_is_broken(r)).cloned());
        match cached {
            Some(route) => {
                ctx.trace(
                    TraceKind::RouteInstalled,
                    None,
                    format!("flow={flow} cache {}", join(&route)),
                );
                self.adopt_route(ctx, flow, route);
            }
            None => {
                self.recovering.insert(flow);
                if let Some(e) = self.table.get_mut(&flow) {
                    e.next_hop = None;
                }
                let held: Vec<Packet> = self.held.remove(&flow).map(Vec::from).unwrap_or_default();
                for p in held {
                    self.lost(ctx, p, None, LossReason::Recovery);
                }
                self.route_discovery(ctx, flow);
            }
        }
    }

    fn route_is_broken(&self, route: &[NodeId]) -> bool {
        if route.len() < 2 {
            return true;
        }
        if self.neighbor_state(route[1]) == NeighborState::Failed {
            return true;
        }
        self.known_broken.iter().any(|&l| route_uses(route, l))
    }

    fn adopt_route(&mut self, ctx: &mut Ctx, flow: Flow, route: Vec<NodeId>) {
        self.table.install(RoutingEntry {
            key: flow,
            next_hop: route.get(1).copied(),
            prev_hop: None,
            stamp: ctx.now,
        });
        self.current_route.insert(flow, route.clone());
        self.cache_route(flow, route.clone());
        self.recovering.remove(&flow);
        self.suspended.remove(&flow);
        let held: Vec<Packet> = self.held.remove(&flow).map(Vec::from).unwrap_or_default();
        for mut p in held {
            p.route = route.clone();
            self.forward_data(ctx, p, None);
        }
    }

    // ---- discovery ----------------------------------------------------------

    fn route_discovery(&mut self, ctx: &mut Ctx, flow: Flow) {
        if self.discovery.contains_key(&flow) {
            return;
        }
        let id = ctx.ids.next_u64();
        self.discovery.insert(flow, Discovery { id, attempts: 1 });
        self.flood_rreq(ctx, flow, id);
    }

    fn flood_rreq(&mut self, ctx: &mut Ctx, flow: Flow, id: u64) {
        self.seen_rreq.insert((self.id, id));
        ctx.trace(TraceKind::Rreq, None, format!("flow={flow} discovery={id}"));
        for nb in self.neighbors.clone() {
            let p = Packet::rreq(ctx.ids.packet(), flow, id, vec![self.id], ctx.now);
            self.send_unreliable(ctx, nb, p);
        }
        ctx.out.push(Action::SetTimer {
            at: ctx.now + self.cfg.discovery_timeout,
            timer: Timer::Discovery { flow, discovery: id },
        });
    }

    fn on_discovery_timeout(&mut self, ctx: &mut Ctx, flow: Flow, id: u64) {
        let Some(d) = self.discovery.get(&flow).copied() else {
            return;
        };
        if d.id != id {
            return;
        }
        if d.attempts <= self.cfg.rreq_retries {
            let next = ctx.ids.next_u64();
            self.discovery.insert(
                flow,
                Discovery {
                    id: next,
                    attempts: d.attempts + 1,
                },
            );
            self.flood_rreq(ctx, flow, next);
            return;
        }
        self.discovery.remove(&flow);
        ctx.trace(
            TraceKind::DiscoveryFailed,
            None,
            format!("flow={flow} attempts={}", d.attempts),
        );
        let held: Vec<Packet> = self.held.remove(&flow).map(Vec::from).unwrap_or_default();
        for p in held {
            self.lost(ctx, p, None, LossReason::DiscoveryFailed);
        }
        self.recovering.remove(&flow);
        self.suspended.insert(flow, ctx.now + self.cfg.discovery_backoff);
    }

    fn on_rreq(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        self.mark_alive(ctx, from);
        let Some(&originator) = packet.route.first() else {
            return;
        };
        if !self.seen_rreq.insert((originator, packet.seq)) || packet.route.contains(&self.id) {
            return;
        }
        let mut route = packet.route.clone();
        route.push(self.id);
        if packet.flow.destination == self.id {
            self.table.install(RoutingEntry {
                key: packet.flow,
                next_hop: None,
                prev_hop: Some(from),
                stamp: ctx.now,
            });
            let rrep = Packet::rrep(ctx.ids.packet(), packet.flow, packet.seq, route, ctx.now);
            self.send_unreliable(ctx, from, rrep);
            return;
        }
        for nb in self.neighbors.clone() {
            if nb == from || route.contains(&nb) {
                continue;
            }
            let p = Packet::rreq(ctx.ids.packet(), packet.flow, packet.seq, route.clone(), ctx.now);
            self.send_unreliable(ctx, nb, p);
        }
    }

    fn on_rrep(&mut self, ctx: &mut Ctx, packet: Packet, from: NodeId) {
        self.mark_alive(ctx, from);
        let route = packet.route;
        let flow = packet.flow;
        let Some(i) = route.iter().position(|&n| n == self.id) else {
            return;
        };
        let next = route.get(i + 1).copied();
        if i > 0 {
            // The source keeps its own route; it only relays replies to a relay's discovery.
            if flow.source != self.id {
                self.table.install(RoutingEntry {
                    key: flow,
                    next_hop: next,
                    prev_hop: Some(route[i - 1]),
                    stamp: ctx.now,
                });
            }
            let p = Packet::rrep(ctx.ids.packet(), flow, packet.seq, route.clone(), ctx.now);
            self.send_unreliable(ctx, route[i - 1], p);
            return;
        }
        match self.discovery.get(&flow) {
            Some(d) if d.id == packet.seq => {}
            _ => return,
        }
        self.discovery.remove(&flow);
        ctx.trace(
            TraceKind::RouteInstalled,
            None,
            format!("flow={flow} discovered {}", join(&route)),
        );
        if flow.source == self.id {
            self.adopt_route(ctx, flow, route);
        } else {
            let prev = self.table.get(&flow).and_then(|e| e.prev_hop);
            self.table.install(RoutingEntry {
                key: flow,
                next_hop: next,
                prev_hop: prev,
                stamp: ctx.now,
            });
            self.suspended.remove(&flow);
            let ahead = &route[i + 1..];
            let held: Vec<Packet> = self.held.remove(&flow).map(Vec::from).unwrap_or_default();
            for p in held {
                // Upstream nodes have already seen this packet and would refuse it.
                let upstream = p.route.iter().take_while(|&&n| n != self.id).chain([&p.flow.source]);
                if upstream.into_iter().any(|n| ahead.contains(n)) {
                    self.lost(ctx, p, None, LossReason::Loop);
                } else {
                    self.forward_data(ctx, p, None);
                }
            }
        }
    }
}

fn join(route: &[NodeId]) -> String {
    route.iter().map(|n| n.0.to_string()).collect::<Vec<_>>().join("-")
}
