use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{Flow, NodeId, PacketId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PacketKind {
    Data,
    Ack,
    Nack,
    Rerr,
    Rreq,
    Rrep,
}

impl PacketKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketKind::Data => "DATA",
            PacketKind::Ack => "ACK",
            PacketKind::Nack => "NACK",
            PacketKind::Rerr => "RERR",
            PacketKind::Rreq => "RREQ",
            PacketKind::Rrep => "RREP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_uppercase().as_str() {
            "DATA" => PacketKind::Data,
            "ACK" => PacketKind::Ack,
            "NACK" => PacketKind::Nack,
            "RERR" => PacketKind::Rerr,
            "RREQ" => PacketKind::Rreq,
            "RREP" => PacketKind::Rrep,
            _ => return None,
        })
    }
}

impl fmt::Display for PacketKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Route error payload carried hop by hop toward the flow source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerrInfo {
    /// Identity of this error report; stable across hops and detours.
    pub id: u64,
    /// (detecting node, unreachable neighbor).
    pub broken_link: (NodeId, NodeId),
    pub origin: NodeId,
    pub target_source: NodeId,
    pub detected_at: SimTime,
    /// Flow whose route traversed the broken link.
    pub flow: Flow,
    /// DATA packet whose exhausted retries produced the failure verdict.
    pub trigger: Option<PacketId>,
    /// Nodes that already relayed this report; never chosen again as a hop.
    pub visited: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub id: PacketId,
    pub kind: PacketKind,
    pub flow: Flow,
    /// Per-flow sequence number for DATA; discovery id for RREQ/RREP.
    pub seq: u64,
    pub frame_id: Option<u32>,
    pub description_id: Option<u8>,
    pub rerr: Option<RerrInfo>,
    /// Packet acknowledged (ACK) or refused as duplicate (NACK).
    pub ack_of: Option<PacketId>,
    /// Source route: carried by DATA as a header, accumulated by RREQ, returned by RREP.
    pub route: Vec<NodeId>,
    /// Id assigned at injection. Multicast fan-out copies get fresh ids but keep this.
    pub origin_id: PacketId,
    /// Injection time at the source.
    pub created_at: SimTime,
}

impl Packet {
    fn bare(id: PacketId, kind: PacketKind, flow: Flow, seq: u64, now: SimTime) -> Self {
        Packet {
            id,
            kind,
            flow,
            seq,
            frame_id: None,
            description_id: None,
            rerr: None,
            ack_of: None,
            route: Vec::new(),
            origin_id: id,
            created_at: now,
        }
    }

    pub fn data(id: PacketId, flow: Flow, seq: u64, frame_id: u32, description_id: u8, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Data, flow, seq, now);
        p.frame_id = Some(frame_id);
        p.description_id = Some(description_id);
        p
    }

    pub fn ack(id: PacketId, of: &Packet, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Ack, of.flow, of.seq, now);
        p.ack_of = Some(of.id);
        p
    }

    pub fn nack(id: PacketId, of: &Packet, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Nack, of.flow, of.seq, now);
        p.ack_of = Some(of.id);
        p
    }

    pub fn rerr(id: PacketId, info: RerrInfo, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Rerr, info.flow, 0, now);
        p.rerr = Some(info);
        p
    }

    pub fn rreq(id: PacketId, flow: Flow, discovery: u64, route: Vec<NodeId>, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Rreq, flow, discovery, now);
        p.route = route;
        p
    }

    pub fn rrep(id: PacketId, flow: Flow, discovery: u64, route: Vec<NodeId>, now: SimTime) -> Self {
        let mut p = Packet::bare(id, PacketKind::Rrep, flow, discovery, now);
        p.route = route;
        p
    }

    /// Short human-readable summary used in trace detail columns.
    pub fn summary(&self) -> String {
        match self.kind {
            PacketKind::Data => format!(
                "DATA flow={} seq={} frame={}",
                self.flow,
                self.seq,
                self.frame_id.map_or("-".to_string(), |f| f.to_string())
            ),
            PacketKind::Ack | PacketKind::Nack => format!(
                "{} of={}",
                self.kind,
                self.ack_of.map_or("-".to_string(), |i| i.to_string())
            ),
            PacketKind::Rerr => match &self.rerr {
                Some(info) => format!(
                    "RERR rerr={} broken={}-{} target={}",
                    info.id, info.broken_link.0, info.broken_link.1, info.target_source
                ),
                None => "RERR".to_string(),
            },
            PacketKind::Rreq | PacketKind::Rrep => format!(
                "{} flow={} disc={} route={}",
                self.kind,
                self.flow,
                self.seq,
                route_string(&self.route)
            ),
        }
    }
}

pub fn route_string(route: &[NodeId]) -> String {
    route.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
}
