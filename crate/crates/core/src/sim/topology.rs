use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::types::{link_key, NodeId, SimTime};

/// Half-open outage `[down_at, up_at)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureInterval {
    pub down_at: SimTime,
    pub up_at: SimTime,
}

impl FailureInterval {
    pub fn contains(&self, t: SimTime) -> bool {
        self.down_at <= t && t < self.up_at
    }

    fn overlaps(&self, other: &FailureInterval) -> bool {
        self.down_at < other.up_at && other.down_at < self.up_at
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub endpoints: (NodeId, NodeId),
    pub propagation_delay: SimTime,
    pub loss_rate: f64,
    /// Disjoint and sorted by `down_at`.
    failures: Vec<FailureInterval>,
}

impl Link {
    pub fn new(a: NodeId, b: NodeId, propagation_delay: SimTime, loss_rate: f64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&loss_rate) {
            return Err(SimError::InvalidLossRate(loss_rate));
        }
        if a == b {
            return Err(SimError::SelfLink(a));
        }
        Ok(Link {
            endpoints: (a, b),
            propagation_delay,
            loss_rate,
            failures: Vec::new(),
        })
    }

    pub fn key(&self) -> (NodeId, NodeId) {
        link_key(self.endpoints.0, self.endpoints.1)
    }

    pub fn failures(&self) -> &[FailureInterval] {
        &self.failures
    }

    pub fn is_down(&self, t: SimTime) -> bool {
        // Intervals are sorted; the candidate is the last one starting at or before t.
        let idx = self.failures.partition_point(|f| f.down_at <= t);
        idx > 0 && self.failures[idx - 1].contains(t)
    }

    pub fn connects(&self, a: NodeId, b: NodeId) -> bool {
        self.key() == link_key(a, b)
    }

    pub(crate) fn add_failure(&mut self, interval: FailureInterval) -> Result<(), SimError> {
        if interval.down_at >= interval.up_at {
            return Err(SimError::EmptyInterval {
                down_at: interval.down_at,
                up_at: interval.up_at,
            });
        }
        if let Some(existing) = self.failures.iter().find(|f| f.overlaps(&interval)) {
            return Err(SimError::OverlappingFailure {
                link: self.key(),
                existing: (existing.down_at, existing.up_at),
                requested: (interval.down_at, interval.up_at),
            });
        }
        let pos = self.failures.partition_point(|f| f.down_at < interval.down_at);
        self.failures.insert(pos, interval);
        Ok(())
    }
}

/// Source-rooted multicast distribution tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MulticastTree {
    pub root: NodeId,
    /// child -> parent
    pub parent: BTreeMap<NodeId, NodeId>,
}

impl MulticastTree {
    pub fn new(root: NodeId, parent: BTreeMap<NodeId, NodeId>) -> Result<Self, SimError> {
        if parent.contains_key(&root) {
            return Err(SimError::TreeCycle(root));
        }
        for &start in parent.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = start;
            while cur != root {
                if !seen.insert(cur) {
                    return Err(SimError::TreeCycle(start));
                }
                cur = match parent.get(&cur) {
                    Some(&p) => p,
                    None => return Err(SimError::TreeDetached(cur)),
                };
            }
        }
        Ok(MulticastTree { root, parent })
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node == self.root || self.parent.contains_key(&node)
    }

    pub fn parent_of(&self, node: NodeId) -> Option<NodeId> {
        self.parent.get(&node).copied()
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.parent
            .iter()
            .filter(|(_, &p)| p == node)
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.contains(node) && self.children(node).is_empty()
    }

    pub fn leaves(&self) -> Vec<NodeId> {
        self.parent.keys().copied().filter(|&n| self.is_leaf(n)).collect()
    }

    /// Leaves of the subtree rooted at `node` (the node itself if it is a leaf).
    pub fn leaves_under(&self, node: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            let kids = self.children(n);
            if kids.is_empty() {
                if n != self.root {
                    out.push(n);
                }
            } else {
                stack.extend(kids);
            }
        }
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Topology {
    nodes: BTreeSet<NodeId>,
    links: Vec<Link>,
    #[serde(skip)]
    index: BTreeMap<(NodeId, NodeId), usize>,
    multicast_tree: Option<MulticastTree>,
}

impl Topology {
    pub fn new(nodes: impl IntoIterator<Item = NodeId>) -> Self {
        Topology {
            nodes: nodes.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn add_link(&mut self, link: Link) -> Result<usize, SimError> {
        for n in [link.endpoints.0, link.endpoints.1] {
            if !self.nodes.contains(&n) {
                return Err(SimError::UnknownNode(n));
            }
        }
        let key = link.key();
        if self.index.contains_key(&key) {
            return Err(SimError::DuplicateLink(key));
        }
        let idx = self.links.len();
        self.index.insert(key, idx);
        self.links.push(link);
        Ok(idx)
    }

    pub fn set_multicast_tree(&mut self, tree: MulticastTree) -> Result<(), SimError> {
        for (&child, &parent) in &tree.parent {
            for n in [child, parent] {
                if !self.nodes.contains(&n) {
                    return Err(SimError::UnknownNode(n));
                }
            }
            if self.link_index(child, parent).is_none() {
                return Err(SimError::UnknownLink(link_key(child, parent)));
            }
        }
        if !self.nodes.contains(&tree.root) {
            return Err(SimError::UnknownNode(tree.root));
        }
        self.multicast_tree = Some(tree);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn has_node(&self, n: NodeId) -> bool {
        self.nodes.contains(&n)
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link_index(&self, a: NodeId, b: NodeId) -> Option<usize> {
        self.index.get(&link_key(a, b)).copied()
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&Link> {
        self.link_index(a, b).map(|i| &self.links[i])
    }

    pub(crate) fn link_mut(&mut self, idx: usize) -> &mut Link {
        &mut self.links[idx]
    }

    pub fn multicast_tree(&self) -> Option<&MulticastTree> {
        self.multicast_tree.as_ref()
    }

    /// Neighbors of `n` in ascending id order.
    pub fn neighbors(&self, n: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .links
            .iter()
            .filter_map(|l| {
                if l.endpoints.0 == n {
                    Some(l.endpoints.1)
                } else if l.endpoints.1 == n {
                    Some(l.endpoints.0)
                } else {
                    None
                }
            })
            .collect();
        out.sort();
        out
    }

    /// Whether `a` and `b` are connected using only links that are up at `t`.
    pub fn connected_at(&self, a: NodeId, b: NodeId, t: SimTime) -> bool {
        let mut seen = BTreeSet::from([a]);
        let mut stack = vec![a];
        while let Some(n) = stack.pop() {
            if n == b {
                return true;
            }
            for m in self.neighbors(n) {
                let up = self.link(n, m).is_some_and(|l| !l.is_down(t));
                if up && seen.insert(m) {
                    stack.push(m);
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(i: u32) -> NodeId {
        NodeId(i)
    }

    #[test]
    fn failure_interval_is_half_open() {
        let mut l = Link::new(n(0), n(1), SimTime(2), 0.0).unwrap();
        l.add_failure(FailureInterval {
            down_at: SimTime(10),
            up_at: SimTime(20),
        })
        .unwrap();
        assert!(!l.is_down(SimTime(9)));
        assert!(l.is_down(SimTime(10)));
        assert!(l.is_down(SimTime(19)));
        assert!(!l.is_down(SimTime(20)));
    }

    #[test]
    fn overlapping_and_empty_intervals_rejected() {
        let mut l = Link::new(n(0), n(1), SimTime(2), 0.0).unwrap();
        l.add_failure(FailureInterval {
            down_at: SimTime(10),
            up_at: SimTime(20),
        })
        .unwrap();
        assert!(matches!(
            l.add_failure(FailureInterval {
                down_at: SimTime(15),
                up_at: SimTime(25)
            }),
            Err(SimError::OverlappingFailure { .. })
        ));
        assert!(matches!(
            l.add_failure(FailureInterval {
                down_at: SimTime(30),
                up_at: SimTime(30)
            }),
            Err(SimError::EmptyInterval { .. })
        ));
        // adjacent is fine: [20,30) touches [10,20) without overlapping
        l.add_failure(FailureInterval {
            down_at: SimTime(20),
            up_at: SimTime(30),
        })
        .unwrap();
        l.add_failure(FailureInterval {
            down_at: SimTime(0),
            up_at: SimTime(5),
        })
        .unwrap();
        let starts: Vec<u64> = l.failures().iter().map(|f| f.down_at.0).collect();
        assert_eq!(starts, vec![0, 10, 20]);
    }

    #[test]
    fn loss_rate_bounds() {
        assert!(Link::new(n(0), n(1), SimTime(1), 1.5).is_err());
        assert!(Link::new(n(0), n(1), SimTime(1), -0.1).is_err());
        assert!(Link::new(n(0), n(0), SimTime(1), 0.0).is_err());
    }

    #[test]
    fn topology_rejects_undeclared_endpoint() {
        let mut t = Topology::new([n(0), n(1)]);
        let err = t.add_link(Link::new(n(0), n(7), SimTime(1), 0.0).unwrap()).unwrap_err();
        assert_eq!(err, SimError::UnknownNode(n(7)));
    }

    #[test]
    fn tree_cycle_detected() {
        let parent = BTreeMap::from([(n(1), n(2)), (n(2), n(1))]);
        assert!(MulticastTree::new(n(0), parent).is_err());
        let parent = BTreeMap::from([(n(1), n(0)), (n(2), n(0)), (n(3), n(1))]);
        let tree = MulticastTree::new(n(0), parent).unwrap();
        assert_eq!(tree.children(n(0)), vec![n(1), n(2)]);
        assert_eq!(tree.leaves(), vec![n(2), n(3)]);
        assert_eq!(tree.leaves_under(n(1)), vec![n(3)]);
        assert_eq!(tree.leaves_under(n(0)), vec![n(2), n(3)]);
    }
}
