//! Discrete-event simulator for acknowledged route-error propagation over
//! multipath ad-hoc routes, with RERR-driven packet-loss estimation feeding a
//! two-description video encoder.

pub mod estimator;
pub mod harness;
pub mod mdc;
pub mod packet;
pub mod routing;
pub mod sim;
pub mod types;

pub use packet::{Packet, PacketKind, RerrInfo};
pub use types::{Flow, IdGen, NodeId, PacketId, SimTime};
