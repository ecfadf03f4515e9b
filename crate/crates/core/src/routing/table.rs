use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{Flow, NodeId, SimTime};

/// Per-node record for one flow. `prev_hop` is `None` at the source and
/// `next_hop` is `None` at the destination or after the next hop was declared dead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingEntry {
    pub key: Flow,
    pub next_hop: Option<NodeId>,
    pub prev_hop: Option<NodeId>,
    pub stamp: SimTime,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoutingTable {
    entries: BTreeMap<Flow, RoutingEntry>,
}

impl RoutingTable {
    /// Install or overwrite the entry for `entry.key`.
    pub fn install(&mut self, entry: RoutingEntry) {
        self.entries.insert(entry.key, entry);
    }

    pub fn get(&self, flow: &Flow) -> Option<&RoutingEntry> {
        self.entries.get(flow)
    }

    pub fn get_mut(&mut self, flow: &Flow) -> Option<&mut RoutingEntry> {
        self.entries.get_mut(flow)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RoutingEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Flows currently forwarded through `neighbor`.
    pub fn flows_via(&self, neighbor: NodeId) -> Vec<Flow> {
        self.entries
            .values()
            .filter(|e| e.next_hop == Some(neighbor))
            .map(|e| e.key)
            .collect()
    }

    /// Neighbors that lead toward `source` according to any entry: the previous
    /// hop of flows originating there, or the next hop of flows addressed to it.
    pub fn neighbors_toward(&self, source: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .entries
            .values()
            .filter_map(|e| {
                if e.key.source == source {
                    e.prev_hop
                } else if e.key.destination == source {
                    e.next_hop
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    #[test]
    fn one_entry_per_key() {
        let mut t = RoutingTable::default();
        let f = Flow::new(n(0), n(3), 0);
        t.install(RoutingEntry {
            key: f,
            next_hop: Some(n(2)),
            prev_hop: Some(n(0)),
            stamp: SimTime(1),
        });
        t.install(RoutingEntry {
            key: f,
            next_hop: Some(n(4)),
            prev_hop: Some(n(0)),
            stamp: SimTime(2),
        });
        assert_eq!(t.len(), 1);
        assert_eq!(t.get(&f).unwrap().next_hop, Some(n(4)));
        assert_eq!(t.flows_via(n(4)), vec![f]);
        assert!(t.flows_via(n(2)).is_empty());
    }

    #[test]
    fn neighbors_toward_uses_both_directions() {
        let mut t = RoutingTable::default();
        t.install(RoutingEntry {
            key: Flow::new(n(0), n(9), 0),
            next_hop: Some(n(5)),
            prev_hop: Some(n(4)),
            stamp: SimTime(0),
        });
        t.install(RoutingEntry {
            key: Flow::new(n(9), n(0), 0),
            next_hop: Some(n(3)),
            prev_hop: Some(n(5)),
            stamp: SimTime(0),
        });
        t.install(RoutingEntry {
            key: Flow::new(n(7), n(9), 0),
            next_hop: Some(n(5)),
            prev_hop: Some(n(1)),
            stamp: SimTime(0),
        });
        assert_eq!(t.neighbors_toward(n(0)), vec![n(3), n(4)]);
    }
}
