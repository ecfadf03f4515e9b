//! Two-description synthetic video: temporal split, reference selection driven
//! by estimated frame corruption, and decodability at the receiver.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::estimator::{frame_corruption_prob, EstimatorError};
use crate::packet::Packet;
use crate::types::{Flow, IdGen, PacketId, SimTime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u32,
    pub description_id: u8,
    pub packet_ids: Vec<PacketId>,
    pub references: Vec<u32>,
    pub corruption_prob: f64,
}

impl Frame {
    pub fn new(id: u32, description_id: u8) -> Self {
        Frame {
            id,
            description_id,
            packet_ids: Vec::new(),
            references: Vec::new(),
            corruption_prob: 0.0,
        }
    }
}

/// Frame ids split by description; `interleave` restores display order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionPair {
    pub even_description: Vec<u32>,
    pub odd_description: Vec<u32>,
    pub threshold: f64,
}

impl DescriptionPair {
    pub fn interleave(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.even_description.len() + self.odd_description.len());
        let mut odd = self.odd_description.iter();
        for &e in &self.even_description {
            out.push(e);
            if let Some(&o) = odd.next() {
                out.push(o);
            }
        }
        out.extend(odd);
        out
    }
}

/// Even positions go to description 0, odd positions to description 1.
pub fn split_into_descriptions(frames: &[u32], threshold: f64) -> DescriptionPair {
    let (even, odd): (Vec<_>, Vec<_>) = frames.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    DescriptionPair {
        even_description: even.into_iter().map(|(_, &f)| f).collect(),
        odd_description: odd.into_iter().map(|(_, &f)| f).collect(),
        threshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefCandidate {
    pub frame: u32,
    pub corruption_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefSelection {
    pub references: Vec<u32>,
    /// Own-description candidates dropped for exceeding the threshold.
    pub removed: Vec<u32>,
    /// Whether the other description was consulted.
    pub fallback: bool,
}

/// Drop own-description references whose corruption probability exceeds
/// `threshold`; if none survive, fall back to the other description's frames,
/// threshold-filtered as well unless `filter_cross` is off.
pub fn select_references(
    candidates: &[RefCandidate],
    other_description: &[RefCandidate],
    threshold: f64,
    filter_cross: bool,
) -> RefSelection {
    let (kept, removed): (Vec<&RefCandidate>, Vec<&RefCandidate>) =
        candidates.iter().partition(|c| c.corruption_prob <= threshold);
    let removed = removed.into_iter().map(|c| c.frame).collect();
    if !kept.is_empty() {
        return RefSelection {
            references: kept.into_iter().map(|c| c.frame).collect(),
            removed,
            fallback: false,
        };
    }
    let references = other_description
        .iter()
        .filter(|c| !filter_cross || c.corruption_prob <= threshold)
        .map(|c| c.frame)
        .collect();
    RefSelection {
        references,
        removed,
        fallback: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeLogEntry {
    pub frame: u32,
    pub description_id: u8,
    pub candidates: Vec<u32>,
    pub references: Vec<u32>,
    pub removed: Vec<u32>,
    pub fallback: bool,
    pub packets: Vec<PacketId>,
    pub path: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub packets_per_frame: usize,
    pub threshold: f64,
    /// Number of descriptions in use (1 or 2).
    pub descriptions: u8,
    /// How many of the nearest prior frames per description are candidates.
    pub ref_depth: usize,
    pub filter_cross: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            packets_per_frame: 2,
            threshold: 0.5,
            descriptions: 2,
            ref_depth: 1,
            filter_cross: true,
        }
    }
}

/// Source-side encoder state: frames produced so far and their latest corruption estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    frames: Vec<Frame>,
    log: Vec<EncodeLogEntry>,
    /// Next sequence number per flow; descriptions sharing a flow share the counter.
    next_seq: BTreeMap<Flow, u64>,
    packet_loss: BTreeMap<PacketId, f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Self {
        Encoder {
            config,
            frames: Vec::new(),
            log: Vec::new(),
            next_seq: BTreeMap::new(),
            packet_loss: BTreeMap::new(),
        }
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn log(&self) -> &[EncodeLogEntry] {
        &self.log
    }

    pub fn description_of(&self, frame: u32) -> u8 {
        if self.config.descriptions >= 2 {
            (frame % 2) as u8
        } else {
            0
        }
    }

    fn nearest(&self, description: u8) -> Vec<RefCandidate> {
        self.frames
            .iter()
            .rev()
            .filter(|f| f.description_id == description)
            .take(self.config.ref_depth)
            .map(|f| RefCandidate {
                frame: f.id,
                corruption_prob: f.corruption_prob,
            })
            .collect()
    }

    /// Choose references for the next frame, packetize it and stamp packets for
    /// the description's path (`flows[d]`).
    pub fn encode_and_dispatch(&mut self, flows: &[Flow], ids: &mut IdGen, now: SimTime) -> Vec<Packet> {
        let frame_id = self.frames.len() as u32;
        let desc = self.description_of(frame_id);
        let own = self.nearest(desc);
        let other = if self.config.descriptions >= 2 {
            self.nearest(1 - desc)
        } else {
            Vec::new()
        };
        let sel = select_references(&own, &other, self.config.threshold, self.config.filter_cross);

        let flow = flows[(desc as usize).min(flows.len() - 1)];
        let mut frame = Frame::new(frame_id, desc);
        frame.references = sel.references.clone();
        let packets: Vec<Packet> = (0..self.config.packets_per_frame)
            .map(|_| {
                let seq = self.next_seq.entry(flow).or_insert(0);
                let p = Packet::data(ids.packet(), flow, *seq, frame_id, desc, now);
                *seq += 1;
                p
            })
            .collect();
        frame.packet_ids = packets.iter().map(|p| p.id).collect();
        self.log.push(EncodeLogEntry {
            frame: frame_id,
            description_id: desc,
            candidates: own.iter().map(|c| c.frame).collect(),
            references: sel.references,
            removed: sel.removed,
            fallback: sel.fallback,
            packets: frame.packet_ids.clone(),
            path: flow.path,
        });
        self.frames.push(frame);
        packets
    }

    /// Merge new per-packet loss estimates and recompute the corruption
    /// probability of every frame they touch. Packets never estimated count as 0.
    pub fn update_corruption(&mut self, packet_loss: &[(PacketId, f64)]) -> Result<(), EstimatorError> {
        for &(pid, p) in packet_loss {
            self.packet_loss.insert(pid, p);
        }
        for frame in &mut self.frames {
            if !frame
                .packet_ids
                .iter()
                .any(|pid| packet_loss.iter().any(|(p, _)| p == pid))
            {
                continue;
            }
            let probs: Vec<f64> = frame
                .packet_ids
                .iter()
                .map(|pid| self.packet_loss.get(pid).copied().unwrap_or(0.0))
                .collect();
            frame.corruption_prob = frame_corruption_prob(&probs)?;
        }
        Ok(())
    }
}

/// A frame decodes iff all its packets arrived and all its references decoded.
pub fn decodable(frame: &Frame, received: &BTreeSet<PacketId>, decoded: &BTreeSet<u32>) -> bool {
    frame.packet_ids.iter().all(|p| received.contains(p)) && frame.references.iter().all(|r| decoded.contains(r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameStatus {
    Decoded,
    Corrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceiverReport {
    pub decoded: usize,
    pub corrupted: usize,
    pub status: Vec<(u32, FrameStatus)>,
}

pub fn receiver_report(frames: &[Frame], received: &BTreeSet<PacketId>) -> ReceiverReport {
    let mut order: Vec<&Frame> = frames.iter().collect();
    order.sort_by_key(|f| f.id);
    let mut decoded = BTreeSet::new();
    let mut status = Vec::with_capacity(order.len());
    for f in order {
        if decodable(f, received, &decoded) {
            decoded.insert(f.id);
            status.push((f.id, FrameStatus::Decoded));
        } else {
            status.push((f.id, FrameStatus::Corrupted));
        }
    }
    ReceiverReport {
        decoded: decoded.len(),
        corrupted: status.len() - decoded.len(),
        status,
    }
}
