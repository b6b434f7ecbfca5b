//! Slot-synchronous timing simulator and closed-form cost models.
//!
//! Every slot lasts as long as its slowest resource. A resource is a
//! directional NIC (inter-node traffic, capacity `nic_bandwidth`) or a
//! directional per-GPU link of one hierarchy level (intra-node traffic,
//! capacity of that level). A resource pays the largest latency among its
//! transfers once per slot plus its bytes over its capacity. Local copies
//! are free.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::Rank;
use crate::machine::{MachineDescriptor, MachineError};
use crate::pipeline::PipelinedPlan;
use crate::presets::CollectiveKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Out,
    In,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Nic { node: usize, nic: usize, dir: Direction },
    Link { rank: Rank, level: usize, dir: Direction },
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = |dir: &Direction| if *dir == Direction::Out { "out" } else { "in" };
        match self {
            Resource::Nic { node, nic, dir } => write!(f, "nic{node}.{nic}.{}", d(dir)),
            Resource::Link { rank, level, dir } => write!(f, "gpu{rank}.l{level}.{}", d(dir)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotTiming {
    pub duration: f64,
    /// Bytes carried by each busy resource, in resource order.
    pub busy: Vec<(Resource, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub slots: Vec<SlotTiming>,
    pub total: f64,
}

impl Timeline {
    /// Bytes leaving all NICs in `slot` divided by the slot duration.
    pub fn nic_bandwidth(&self, slot: usize) -> f64 {
        let s = &self.slots[slot];
        let bytes: u64 = s
            .busy
            .iter()
            .filter(|(r, _)| matches!(r, Resource::Nic { dir: Direction::Out, .. }))
            .map(|(_, b)| b)
            .sum();
        bytes as f64 / s.duration
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerfError {
    #[error("no link parameters for level {0}")]
    MissingLink(usize),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("no inter-node bound: p = {p} fits in one node of {g} GPUs")]
    NoInterNodeBound { p: usize, g: usize },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
}

/// Simulates a pipelined plan on `machine`.
pub fn simulate(plan: &PipelinedPlan, machine: &MachineDescriptor) -> Result<Timeline, PerfError> {
    // resource -> (max alpha, bytes, capacity)
    let mut per_slot: Vec<BTreeMap<Resource, (f64, u64, f64)>> = vec![BTreeMap::new(); plan.num_slots];
    for pt in &plan.transfers {
        let t = &pt.transfer;
        if t.is_local() {
            continue;
        }
        let link = machine.link(t.level).ok_or(PerfError::MissingLink(t.level))?;
        let bytes = (t.count * plan.element_size) as u64;
        let (src_node, dst_node) = (machine.node_of(t.src.rank), machine.node_of(t.dst.rank));
        let charges = if src_node != dst_node {
            let cap = machine.nic_bandwidth;
            [
                (Resource::Nic { node: src_node, nic: machine.nic_of(t.src.rank)?, dir: Direction::Out }, cap),
                (Resource::Nic { node: dst_node, nic: machine.nic_of(t.dst.rank)?, dir: Direction::In }, cap),
            ]
        } else {
            let cap = link.bandwidth;
            [
                (Resource::Link { rank: t.src.rank, level: t.level, dir: Direction::Out }, cap),
                (Resource::Link { rank: t.dst.rank, level: t.level, dir: Direction::In }, cap),
            ]
        };
        let slot = &mut per_slot[pt.slot];
        for (res, cap) in charges {
            let entry = slot.entry(res).or_insert((0.0, 0, cap));
            entry.0 = entry.0.max(link.alpha);
            entry.1 += bytes;
        }
    }
    let slots: Vec<SlotTiming> = per_slot
        .into_iter()
        .map(|res| SlotTiming {
            duration: res.values().map(|&(a, b, c)| a + b as f64 / c).fold(0.0, f64::max),
            busy: res.into_iter().map(|(r, (_, b, _))| (r, b)).collect(),
        })
        .collect();
    let total = slots.iter().map(|s| s.duration).sum();
    Ok(Timeline { slots, total })
}

/// Ring broadcast cost: `(α + d/(kfm))(n+m−2) + intra/m`.
pub fn t_ring(alpha: f64, d: f64, k: f64, f: f64, m: f64, n: f64, intra: f64) -> f64 {
    (alpha + d / (k * f * m)) * (n + m - 2.0) + intra / m
}

/// Tree broadcast cost: `(αm + d/(kf))·⌈log₂ n⌉ + intra/m`.
pub fn t_tree(alpha: f64, d: f64, k: f64, f: f64, m: f64, n: f64, intra: f64) -> f64 {
    let depth = if n <= 1.0 { 0.0 } else { n.log2().ceil() };
    (alpha * m + d / (k * f)) * depth + intra / m
}

/// Asymptotic throughput limit of a collective in bytes/s.
pub fn bound(kind: CollectiveKind, p: usize, g: usize, k: usize, f: f64) -> Result<f64, PerfError> {
    use CollectiveKind::*;
    if p <= g {
        return Err(PerfError::NoInterNodeBound { p, g });
    }
    let kf = k as f64 * f;
    let (p, g) = (p as f64, g as f64);
    Ok(match kind {
        Broadcast | Reduce => kf,
        Gather | Scatter | AllGather | ReduceScatter => kf * p / (p - g),
        AllReduce => kf * p / (2.0 * (p - g)),
        AllToAll => kf * p / (g * (p - g)),
    })
}

/// `d·p/t` with `d` the per-rank payload in bytes.
pub fn throughput(d: f64, p: usize, t: f64) -> Result<f64, PerfError> {
    if !(t > 0.0) {
        return Err(PerfError::NonPositiveTime(t));
    }
    Ok(d * p as f64 / t)
}

/// Simulated time put in context: throughput, bound and closed-form
/// predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub t: f64,
    pub throughput: f64,
    pub bound: Option<f64>,
    pub utilization: Option<f64>,
    pub t_ring: Option<f64>,
    pub t_tree: Option<f64>,
}

impl ThroughputReport {
    /// `count` is the per-rank element count `d` of the collective. Closed
    /// forms are given for broadcast and reduce, with the intra-node term
    /// calibrated as one pass of the payload over the leaf-level link.
    pub fn new(
        kind: CollectiveKind,
        count: usize,
        machine: &MachineDescriptor,
        ring: usize,
        channels: usize,
        timeline: &Timeline,
    ) -> Result<Self, PerfError> {
        let p = machine.world_size();
        let d = (count * machine.element_size) as f64;
        let t = timeline.total;
        let throughput = throughput(d, p, t)?;
        let bound = bound(kind, p, machine.gpus_per_node, machine.nics_per_node, machine.nic_bandwidth).ok();
        let (mut t_ring_pred, mut t_tree_pred) = (None, None);
        if matches!(kind, CollectiveKind::Broadcast | CollectiveKind::Reduce) && machine.num_nodes() > 1 {
            let leaf = machine.link(machine.num_levels()).ok_or(PerfError::MissingLink(machine.num_levels()))?;
            let inter = machine.link(1).ok_or(PerfError::MissingLink(1))?;
            let payload = d * p as f64;
            let intra = payload / leaf.bandwidth;
            let (k, f, m) = (machine.nics_per_node as f64, machine.nic_bandwidth, channels as f64);
            if ring > 1 {
                t_ring_pred = Some(t_ring(inter.alpha, payload, k, f, m, ring as f64, intra));
            }
            t_tree_pred = Some(t_tree(inter.alpha, payload, k, f, m, machine.num_nodes() as f64, intra));
        }
        Ok(ThroughputReport {
            t,
            throughput,
            bound,
            utilization: bound.map(|b| throughput / b),
            t_ring: t_ring_pred,
            t_tree: t_tree_pred,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::{BufferRef, ProgramBuilder};
    use crate::factorize::lower;
    use crate::machine::{Binding, LinkParams, OptimizationConfig};
    use crate::pipeline::pipeline;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs()
    }

    #[test]
    fn closed_forms() {
        // (1e-5 + 2^30 / (4 * 25e9 * 32)) * (4 + 32 - 2)
        let per_hop = 1e-5 + 1073741824.0 / 3.2e12;
        assert!(close(t_ring(1e-5, 2f64.powi(30), 4.0, 25e9, 32.0, 4.0, 0.0), per_hop * 34.0, 1e-12));
        assert!(close(t_ring(1e-5, 2f64.powi(30), 4.0, 25e9, 32.0, 4.0, 0.0), 0.011748, 1e-4));
        assert!(close(t_tree(1e-5, 2f64.powi(30), 4.0, 25e9, 32.0, 4.0, 0.0), 0.022115, 1e-4));
        assert!(close(t_ring(2e-6, 1e6, 1.0, 1e9, 1.0, 2.0, 0.0), 2e-6 + 1e-3, 1e-12));
        assert_eq!(t_tree(1e-5, 1e9, 4.0, 25e9, 8.0, 1.0, 0.5), 0.0625);
        assert_eq!(t_tree(0.0, 1.0, 1.0, 1.0, 1.0, 5.0, 0.0), 3.0);
    }

    #[test]
    fn closed_form_bounds() {
        let f = 25e9;
        assert!(close(bound(CollectiveKind::AllReduce, 16, 4, 4, f).unwrap(), 100e9 * 16.0 / 24.0, 1e-12));
        assert!(close(bound(CollectiveKind::AllToAll, 16, 4, 4, f).unwrap(), 100e9 * 16.0 / 48.0, 1e-12));
        assert_eq!(bound(CollectiveKind::Broadcast, 1000, 4, 4, f).unwrap(), 100e9);
        assert!(matches!(bound(CollectiveKind::Gather, 4, 4, 4, f), Err(PerfError::NoInterNodeBound { .. })));
        assert!(close(throughput(1e9, 16, 0.25).unwrap(), 64e9, 1e-12));
        assert!(throughput(1.0, 1, 0.0).is_err());
    }

    #[test]
    fn single_inter_node_hop() {
        let m = MachineDescriptor {
            hierarchy: vec![2, 1],
            levels: vec![LinkParams::new(3e-6, 1.0, "net"), LinkParams::new(0.0, 1.0, "self")],
            gpus_per_node: 1,
            nics_per_node: 1,
            nic_bandwidth: 1e9,
            binding: Binding::Packed,
            element_size: 4,
        };
        let mut b = ProgramBuilder::new(2).unwrap();
        b.declare_buffer("x", 1000, true).unwrap();
        b.add_multicast(BufferRef::new("x", 0), BufferRef::new("x", 0), 1000, Rank(0), [Rank(1)]).unwrap();
        let plan = lower(&b.finish().unwrap(), &m, &OptimizationConfig::default()).unwrap();
        let tl = simulate(&pipeline(&plan, 1).unwrap(), &m).unwrap();
        assert!(close(tl.total, 3e-6 + 4000.0 / 1e9, 1e-12));
    }
}
