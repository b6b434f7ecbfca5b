//! Routing of one payload chunk through the hierarchy: which rank forwards
//! to which, and in which stage.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::composition::Rank;
use crate::machine::MachineDescriptor;

/// One forwarding edge of a multicast route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) struct Hop {
    pub from: Rank,
    pub to: Rank,
    pub stage: usize,
}

pub(crate) struct Router<'a> {
    pub machine: &'a MachineDescriptor,
    pub ring: usize,
}

impl Router<'_> {
    /// Routes data held by `holder` to every rank in `targets`, starting at
    /// `stage`. `targets` must not contain `holder`.
    pub fn distribute(&self, holder: Rank, targets: &BTreeSet<Rank>, stage: usize, hops: &mut Vec<Hop>) {
        let p = self.machine.world_size();
        if self.ring <= 1 {
            self.tree(holder, 0..p, 0, stage, targets, hops);
            return;
        }

        let q = p / self.ring;
        let home = holder.0 / q;
        let offset = holder.0 - home * q;
        self.tree(holder, home * q..home * q + q, 0, stage, targets, hops);

        let mut prev = holder;
        let mut hop_stage = stage;
        for i in 1..self.ring {
            let node = (home + i) % self.ring;
            let block = node * q..node * q + q;
            let Some(entry) = representative(block.clone(), offset, targets) else {
                continue;
            };
            hops.push(Hop { from: prev, to: entry, stage: hop_stage });
            self.tree(entry, block, 0, hop_stage + 1, targets, hops);
            prev = entry;
            hop_stage += 1;
        }
    }

    /// Multilevel tree inside `scope`. Every hierarchy level that splits the
    /// scope costs one stage, whether or not the holder has anything to send
    /// there, so sibling subtrees stay stage-aligned.
    fn tree(
        &self,
        holder: Rank,
        scope: Range<usize>,
        depth: usize,
        stage: usize,
        targets: &BTreeSet<Rank>,
        hops: &mut Vec<Hop>,
    ) {
        if depth >= self.machine.num_levels() || scope.len() <= 1 {
            return;
        }
        if !targets.range(Rank(scope.start)..Rank(scope.end)).any(|&t| t != holder) {
            return;
        }
        let sub = self.machine.group_size(depth + 1);
        if sub >= scope.len() {
            self.tree(holder, scope, depth + 1, stage, targets, hops);
            return;
        }
        let own_start = scope.start + (holder.0 - scope.start) / sub * sub;
        let offset = holder.0 - own_start;
        for block_start in scope.clone().step_by(sub) {
            if block_start == own_start {
                continue;
            }
            let block = block_start..block_start + sub;
            if let Some(rep) = representative(block.clone(), offset, targets) {
                hops.push(Hop { from: holder, to: rep, stage });
                self.tree(rep, block, depth + 1, stage + 1, targets, hops);
            }
        }
        self.tree(holder, own_start..own_start + sub, depth + 1, stage + 1, targets, hops);
    }
}

/// Rank that receives on behalf of `block`: the rank on the holder's rail
/// (same offset inside the block) when it is a target, else the lowest
/// target. `None` when the block holds no target.
fn representative(block: Range<usize>, offset: usize, targets: &BTreeSet<Rank>) -> Option<Rank> {
    let rail = Rank(block.start + offset);
    if targets.contains(&rail) {
        return Some(rail);
    }
    targets.range(Rank(block.start)..Rank(block.end)).next().copied()
}
