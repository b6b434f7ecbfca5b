//! Pipelining: every transfer is cut into `m` channel pieces and piece `c`
//! of a stage-`t` transfer runs in slot `t + c`, so consecutive stages
//! overlap on different channels.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::composition::{BufferDecl, BufferId};
use crate::factorize::{split_balanced, LowerError, P2PTransfer, StagedPlan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelinedTransfer {
    pub slot: usize,
    #[serde(flatten)]
    pub transfer: P2PTransfer,
}

/// Channel-split plan. `transfers` are ordered by slot and `deps` index
/// into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelinedPlan {
    pub world_size: usize,
    pub buffers: BTreeMap<BufferId, BufferDecl>,
    pub scratch: BTreeMap<usize, usize>,
    pub num_stages: usize,
    pub channels: usize,
    pub num_slots: usize,
    pub element_size: usize,
    pub transfers: Vec<PipelinedTransfer>,
}

impl PipelinedPlan {
    pub fn slot(&self, slot: usize) -> impl Iterator<Item = &PipelinedTransfer> {
        self.transfers.iter().filter(move |t| t.slot == slot)
    }
}

/// Splits every transfer of `plan` into `m` channels. A piece normally runs
/// in slot `stage + channel`; when chunk boundaries of consecutive steps do
/// not line up, a piece may depend on a later channel of its predecessor and
/// is pushed to the slot after it.
pub fn pipeline(plan: &StagedPlan, m: usize) -> Result<PipelinedPlan, LowerError> {
    if m == 0 {
        return Err(LowerError::ZeroPipeline);
    }
    let mut pieces: Vec<PipelinedTransfer> = Vec::new();
    let mut owned: Vec<Vec<usize>> = Vec::with_capacity(plan.transfers.len());
    for t in &plan.transfers {
        let mut mine = Vec::new();
        for (c, range) in split_balanced(t.count, m).into_iter().enumerate() {
            if range.is_empty() {
                continue;
            }
            let mut piece = t.clone();
            piece.src.offset += range.start;
            piece.dst.offset += range.start;
            piece.count = range.len();
            piece.channel = c;
            piece.deps.clear();
            let mut slot = t.stage + c;
            let mut deps = Vec::new();
            for &base in &t.deps {
                for &other in &owned[base] {
                    if piece.conflicts_with(&pieces[other].transfer) {
                        deps.push(other);
                        slot = slot.max(pieces[other].slot + 1);
                    }
                }
            }
            piece.deps = deps;
            mine.push(pieces.len());
            pieces.push(PipelinedTransfer { slot, transfer: piece });
        }
        owned.push(mine);
    }

    let mut order: Vec<usize> = (0..pieces.len()).collect();
    order.sort_by_key(|&i| (pieces[i].slot, i));
    let remap: HashMap<usize, usize> = order.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let mut transfers: Vec<PipelinedTransfer> = order.iter().map(|&i| pieces[i].clone()).collect();
    for t in &mut transfers {
        for d in &mut t.transfer.deps {
            *d = remap[d];
        }
        t.transfer.deps.sort_unstable();
    }
    let num_slots = transfers.iter().map(|t| t.slot + 1).max().unwrap_or(0);
    Ok(PipelinedPlan {
        world_size: plan.world_size,
        buffers: plan.buffers.clone(),
        scratch: plan.scratch.clone(),
        num_stages: plan.num_stages,
        channels: m,
        num_slots,
        element_size: plan.element_size,
        transfers,
    })
}

/// Bytes sent from each rank (row) to each rank (column) in `slot`. Local
/// copies are not communication and are left out.
pub fn comm_matrix(plan: &PipelinedPlan, slot: usize) -> Vec<Vec<u64>> {
    matrix(plan.world_size, plan.element_size, plan.slot(slot).map(|t| &t.transfer))
}

/// Same as [`comm_matrix`] for one stage of an unpipelined plan.
pub fn stage_matrix(plan: &StagedPlan, stage: usize) -> Vec<Vec<u64>> {
    matrix(plan.world_size, plan.element_size, plan.transfers.iter().filter(|t| t.stage == stage))
}

fn matrix<'a>(p: usize, elem: usize, transfers: impl Iterator<Item = &'a P2PTransfer>) -> Vec<Vec<u64>> {
    let mut out = vec![vec![0u64; p]; p];
    for t in transfers.filter(|t| !t.is_local()) {
        out[t.src.rank.0][t.dst.rank.0] += (t.count * elem) as u64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::lower;
    use crate::machine::{Binding, LinkParams, MachineDescriptor, OptimizationConfig};
    use crate::presets::{build, CollectiveKind, CollectiveSpec, Formulation};

    fn machine() -> MachineDescriptor {
        MachineDescriptor {
            hierarchy: vec![4, 3],
            levels: vec![LinkParams::new(1e-6, 1e9, "net"), LinkParams::new(1e-7, 1e10, "ipc")],
            gpus_per_node: 3,
            nics_per_node: 3,
            nic_bandwidth: 1e9,
            binding: Binding::Bijective,
            element_size: 4,
        }
    }

    fn plan(kind: CollectiveKind, f: Formulation, ring: usize) -> StagedPlan {
        let prog = build(&CollectiveSpec::new(kind, f, 7), 12).unwrap();
        lower(&prog, &machine(), &OptimizationConfig::new(1, ring, 1)).unwrap()
    }

    #[test]
    fn single_channel_is_identity() {
        let base = plan(CollectiveKind::AllReduce, Formulation::Multi, 1);
        let piped = pipeline(&base, 1).unwrap();
        assert_eq!(piped.num_slots, base.num_stages);
        let back: Vec<_> = piped.transfers.iter().map(|t| t.transfer.clone()).collect();
        assert_eq!(back, base.transfers);
    }

    #[test]
    fn slots_and_bytes() {
        let base = plan(CollectiveKind::Broadcast, Formulation::Single, 4);
        for m in [2, 3, 5] {
            let piped = pipeline(&base, m).unwrap();
            assert_eq!(piped.num_slots, base.num_stages + m - 1);
            let before: usize = base.transfers.iter().map(|t| t.count).sum();
            let after: usize = piped.transfers.iter().map(|t| t.transfer.count).sum();
            assert_eq!(before, after);
            for (i, t) in piped.transfers.iter().enumerate() {
                for &d in &t.transfer.deps {
                    assert!(d < i && piped.transfers[d].slot < t.slot);
                }
            }
        }
    }

    #[test]
    fn warm_up_and_wind_down() {
        let base = plan(CollectiveKind::Broadcast, Formulation::Single, 4);
        let m = 3;
        let piped = pipeline(&base, m).unwrap();
        let active = |slot: usize| piped.slot(slot).map(|t| t.transfer.channel).collect::<std::collections::BTreeSet<_>>();
        assert_eq!(active(0).into_iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(active(1).into_iter().collect::<Vec<_>>(), vec![0, 1]);
        let last = piped.num_slots - 1;
        assert_eq!(active(last).into_iter().collect::<Vec<_>>(), vec![m - 1]);
    }

    #[test]
    fn matrix_skips_local_copies() {
        let base = plan(CollectiveKind::AllGather, Formulation::Single, 1);
        let piped = pipeline(&base, 1).unwrap();
        for slot in 0..piped.num_slots {
            let mtx = comm_matrix(&piped, slot);
            assert!((0..12).all(|r| mtx[r][r] == 0));
        }
        let total: u64 = (0..piped.num_slots).flat_map(|s| comm_matrix(&piped, s).into_iter().flatten()).sum();
        let remote: u64 = base.transfers.iter().filter(|t| !t.is_local()).map(|t| (t.count * 4) as u64).sum();
        assert_eq!(total, remote);
    }
}
