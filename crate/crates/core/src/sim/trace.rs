use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::types::{NodeId, PacketId, SimTime};

/// Kind column of a trace line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    Tx,
    Rx,
    Drop,
    LinkDown,
    LinkUp,
    Inject,
    Deliver,
    Dup,
    Timeout,
    Retx,
    Defer,
    NackStop,
    Hold,
    Lost,
    LinkFailed,
    RerrGen,
    RerrFwd,
    RerrDetour,
    RerrAtSource,
    RerrStranded,
    Estimate,
    Rreq,
    RouteInstalled,
    DiscoveryFailed,
}

impl TraceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceKind::Tx => "tx",
            TraceKind::Rx => "rx",
            TraceKind::Drop => "drop",
            TraceKind::LinkDown => "link-down",
            TraceKind::LinkUp => "link-up",
            TraceKind::Inject => "inject",
            TraceKind::Deliver => "deliver",
            TraceKind::Dup => "dup",
            TraceKind::Timeout => "timeout",
            TraceKind::Retx => "retx",
            TraceKind::Defer => "defer",
            TraceKind::NackStop => "nack-stop",
            TraceKind::Hold => "hold",
            TraceKind::Lost => "lost",
            TraceKind::LinkFailed => "link-failed",
            TraceKind::RerrGen => "rerr-gen",
            TraceKind::RerrFwd => "rerr-fwd",
            TraceKind::RerrDetour => "rerr-detour",
            TraceKind::RerrAtSource => "rerr-at-source",
            TraceKind::RerrStranded => "rerr-stranded",
            TraceKind::Estimate => "estimate",
            TraceKind::Rreq => "rreq",
            TraceKind::RouteInstalled => "route-installed",
            TraceKind::DiscoveryFailed => "discovery-failed",
        }
    }
}

impl fmt::Display for TraceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub node: NodeId,
    pub kind: TraceKind,
    pub packet: Option<PacketId>,
    pub detail: String,
}

impl fmt::Display for TraceRecord {
    /// `time_us<TAB>node<TAB>kind<TAB>packet_id<TAB>detail`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t", self.time.as_micros(), self.node, self.kind)?;
        match self.packet {
            Some(p) => write!(f, "{p}")?,
            None => f.write_str("-")?,
        }
        write!(f, "\t{}", self.detail)
    }
}

/// Append-only, totally ordered event log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTrace {
    records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn push(&mut self, record: TraceRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter()
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn count(&self, kind: TraceKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{r}")?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace is utf-8")
    }
}
