//! Reliable hop-by-hop forwarding, failure detection, route-error propagation
//! and on-demand route discovery. Nodes are pure state machines: every input
//! yields a list of [`Action`]s that the harness applies to the engine.

mod node;
mod table;

pub use node::{NeighborState, Node, SentRecord};
pub use table::{RoutingEntry, RoutingTable};

use serde::{Deserialize, Serialize};

use crate::estimator::{ChannelParams, LossEstimate};
use crate::packet::{Packet, RerrInfo};
use crate::sim::{Timer, TraceKind};
use crate::types::{IdGen, NodeId, PacketId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Retransmissions after the first attempt; a packet is sent at most `K + 1` times per node.
    pub max_retries: u32,
    pub t_retrans: SimTime,
    pub discovery_timeout: SimTime,
    /// Re-floods after the first RREQ before discovery is abandoned.
    pub rreq_retries: u32,
    /// After a failed discovery the flow drops traffic for this long before trying again.
    pub discovery_backoff: SimTime,
    /// Number of most recent packets re-estimated when a RERR reaches the source.
    pub estimate_window: usize,
    pub channel: ChannelParams,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let channel = ChannelParams::default();
        ProtocolConfig {
            max_retries: 3,
            t_retrans: channel.t_retrans,
            discovery_timeout: SimTime::from_millis(200),
            rreq_retries: 2,
            discovery_backoff: SimTime::from_secs(1),
            estimate_window: 16,
            channel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossReason {
    /// Retry budget exhausted on a link declared failed.
    RetriesExhausted,
    /// Per-node transmission budget already spent before a reroute.
    Budget,
    /// Source is rediscovering a route after a RERR.
    Recovery,
    DiscoveryFailed,
    /// Flow is backing off after a failed discovery.
    Suspended,
    /// Multicast copy toward a child whose link failed.
    SubtreeUnreachable,
    /// The only repaired path runs back through nodes that already saw the packet.
    Loop,
}

impl LossReason {
    pub fn as_str(self) -> &'static str {
        match self {
            LossReason::RetriesExhausted => "retries-exhausted",
            LossReason::Budget => "budget",
            LossReason::Recovery => "recovery",
            LossReason::DiscoveryFailed => "discovery-failed",
            LossReason::Suspended => "suspended",
            LossReason::SubtreeUnreachable => "subtree-unreachable",
            LossReason::Loop => "loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send {
        to: NodeId,
        packet: Packet,
    },
    SetTimer {
        at: SimTime,
        timer: Timer,
    },
    /// DATA handed to the application at this node.
    Deliver {
        packet: Packet,
    },
    /// DATA this node gave up on. `toward` is the neighbor it was headed to, if any.
    Lost {
        packet: Packet,
        toward: Option<NodeId>,
        reason: LossReason,
    },
    Trace {
        kind: TraceKind,
        packet: Option<PacketId>,
        detail: String,
    },
    /// A RERR reached this source; `estimates` pair recent packets with their loss estimates.
    RerrArrived {
        info: RerrInfo,
        transit: SimTime,
        estimates: Vec<(PacketId, LossEstimate)>,
    },
}

/// Per-call context handed to node handlers.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub ids: &'a mut IdGen,
    pub out: Vec<Action>,
}

impl<'a> Ctx<'a> {
    pub fn new(now: SimTime, ids: &'a mut IdGen) -> Self {
        Ctx {
            now,
            ids,
            out: Vec::new(),
        }
    }

    pub fn trace(&mut self, kind: TraceKind, packet: Option<PacketId>, detail: impl Into<String>) {
        self.out.push(Action::Trace {
            kind,
            packet,
            detail: detail.into(),
        });
    }
}
