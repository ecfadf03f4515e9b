//! Discrete-event core: clock, event queue, topology with failure-scheduled lossy links.

mod engine;
mod topology;
mod trace;

use thiserror::Error;

pub use engine::{DropReason, Engine, Event, ForcedDrop, Handler, NoopHandler, Payload, Timer, TxOutcome};
pub use topology::{FailureInterval, Link, MulticastTree, Topology};
pub use trace::{EventTrace, TraceKind, TraceRecord};

use crate::types::{NodeId, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event scheduled at {at} but clock is already at {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },
    #[error("no link between {} and {}", .0.0, .0.1)]
    UnknownLink((NodeId, NodeId)),
    #[error("node {0} is not declared")]
    UnknownNode(NodeId),
    #[error("duplicate link {}-{}", .0.0, .0.1)]
    DuplicateLink((NodeId, NodeId)),
    #[error("link from node {0} to itself")]
    SelfLink(NodeId),
    #[error("loss rate {0} outside [0,1]")]
    InvalidLossRate(f64),
    #[error("failure interval [{down_at}, {up_at}) is empty")]
    EmptyInterval { down_at: SimTime, up_at: SimTime },
    #[error("failure interval {requested:?} on link {}-{} overlaps {existing:?}", .link.0, .link.1)]
    OverlappingFailure {
        link: (NodeId, NodeId),
        existing: (SimTime, SimTime),
        requested: (SimTime, SimTime),
    },
    #[error("multicast tree has a cycle through node {0}")]
    TreeCycle(NodeId),
    #[error("multicast tree node {0} does not reach the root")]
    TreeDetached(NodeId),
}
