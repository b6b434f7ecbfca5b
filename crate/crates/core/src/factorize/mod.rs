//! Lowering of collective programs into staged point-to-point plans.
//!
//! Each primitive is factorized by striping, then ring, then tree. Striping
//! scatters `s` sub-chunks to the lowest-ranked GPUs of the root node, each
//! of which then drives its own ring/tree route; a ring chains the stripe
//! through conceptual nodes on the same rail; the tree walks the hierarchy
//! top-down, one stage per level. Reductions run the mirrored route in
//! reverse, folding with the op at every merge.
//!
//! Steps of the program are laid out one after another in stage space.
//! Dependencies are not barriers: they are computed from overlapping
//! element ranges (read-after-write, write-after-read, write-after-write),
//! with reduce-into accumulations on the same location commuting.

mod route;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{
    validate, BufferDecl, BufferId, BufferRef, CollectiveProgram, Primitive, PrimitiveKind, Rank,
    ReduceOp, Violation,
};
use crate::machine::{validate_machine, MachineDescriptor, MachineViolation, OptimizationConfig};

use route::{Hop, Router};

/// Where a transfer reads or writes on a rank: a program buffer or the
/// per-primitive scratch space introduced by lowering.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Buffer(BufferId),
    Scratch(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Buffer(b) => write!(f, "{b}"),
            Location::Scratch(i) => write!(f, "~scratch{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub rank: Rank,
    pub location: Location,
    pub offset: usize,
}

impl Endpoint {
    fn range(&self, count: usize) -> Range<usize> {
        self.offset..self.offset + count
    }
}

/// A chunk moved from `src` to `dst`. With `op` set the chunk is folded
/// into the destination (an undefined destination element takes the
/// incoming value). `src.rank == dst.rank` marks a local copy, which has
/// level 0 and costs nothing on the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct P2PTransfer {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub count: usize,
    pub op: Option<ReduceOp>,
    pub stage: usize,
    pub level: usize,
    pub stripe: usize,
    pub channel: usize,
    /// Index of the originating primitive in canonical program order.
    pub primitive: usize,
    pub deps: Vec<usize>,
}

impl P2PTransfer {
    pub fn is_local(&self) -> bool {
        self.src.rank == self.dst.rank
    }

    fn sort_key(&self) -> impl Ord + '_ {
        (self.stage, self.src.rank, self.dst.rank, &self.src.location, self.src.offset, &self.dst.location, self.dst.offset, self.count, self.op)
    }

    /// True when running `self` and `other` in either order could differ.
    pub fn conflicts_with(&self, other: &P2PTransfer) -> bool {
        fn accesses(t: &P2PTransfer) -> [(Rank, &Location, Range<usize>, AccessKind); 2] {
            [
                (t.src.rank, &t.src.location, t.src.range(t.count), AccessKind::Read),
                (
                    t.dst.rank,
                    &t.dst.location,
                    t.dst.range(t.count),
                    if t.op.is_some() { AccessKind::Accumulate } else { AccessKind::Write },
                ),
            ]
        }
        accesses(self).iter().any(|(ra, la, rga, ka)| {
            accesses(other).iter().any(|(rb, lb, rgb, kb)| {
                ra == rb && la == lb && ka.conflicts(*kb) && crate::composition::overlaps(rga, rgb)
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AccessKind {
    Read,
    Write,
    Accumulate,
}

impl AccessKind {
    fn conflicts(self, other: AccessKind) -> bool {
        !matches!(
            (self, other),
            (AccessKind::Read, AccessKind::Read) | (AccessKind::Accumulate, AccessKind::Accumulate)
        )
    }
}

/// Dependency graph of point-to-point transfers, canonically ordered by
/// `(stage, src, dst, offsets)`; `deps` refer to indices in `transfers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedPlan {
    pub world_size: usize,
    pub buffers: BTreeMap<BufferId, BufferDecl>,
    /// Scratch length per primitive that needed one.
    pub scratch: BTreeMap<usize, usize>,
    pub num_stages: usize,
    pub stripe: usize,
    pub ring: usize,
    pub element_size: usize,
    pub transfers: Vec<P2PTransfer>,
}

impl StagedPlan {
    pub fn bytes(&self, t: &P2PTransfer) -> u64 {
        (t.count * self.element_size) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LowerError {
    #[error("program is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidProgram(Vec<Violation>),
    #[error("machine is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidMachine(Vec<MachineViolation>),
    #[error("stripe {stripe} must be between 1 and gpus_per_node {g}")]
    StripeOutOfRange { stripe: usize, g: usize },
    #[error("ring {ring} must be between 1 and the node count {nodes}")]
    RingTooLarge { ring: usize, nodes: usize },
    #[error("ring {ring} does not divide the node count {nodes}")]
    RingIndivisible { ring: usize, nodes: usize },
    #[error("conceptual node of {size} ranks cuts through hierarchy groups of {group} ranks")]
    RingMisaligned { size: usize, group: usize },
    #[error("pipeline depth must be at least 1")]
    ZeroPipeline,
    #[error("transfers {first} and {second} conflict inside stage {stage}")]
    StageConflict { first: usize, second: usize, stage: usize },
}

/// Checks striping and ring parameters against the machine.
pub fn validate_config(machine: &MachineDescriptor, config: &OptimizationConfig) -> Result<(), LowerError> {
    let g = machine.gpus_per_node;
    if config.stripe == 0 || config.stripe > g {
        return Err(LowerError::StripeOutOfRange { stripe: config.stripe, g });
    }
    if config.pipeline == 0 {
        return Err(LowerError::ZeroPipeline);
    }
    let nodes = machine.num_nodes();
    let n = config.ring;
    if n == 0 || n > nodes {
        return Err(LowerError::RingTooLarge { ring: n, nodes });
    }
    if !nodes.is_multiple_of(n) {
        return Err(LowerError::RingIndivisible { ring: n, nodes });
    }
    if n > 1 {
        let q = machine.world_size() / n;
        for depth in 0..=machine.num_levels() {
            let group = machine.group_size(depth);
            if !(q.is_multiple_of(group) || group.is_multiple_of(q)) {
                return Err(LowerError::RingMisaligned { size: q, group });
            }
        }
    }
    Ok(())
}

/// Splits `count` into `parts` contiguous ranges; the first `count % parts`
/// ranges are one element longer. Trailing ranges may be empty.
pub fn split_balanced(count: usize, parts: usize) -> Vec<Range<usize>> {
    let base = count / parts;
    let extra = count % parts;
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Route of one stripe of a primitive.
struct StripeRoute {
    stripe: usize,
    chunk: Range<usize>,
    hops: Vec<Hop>,
}

fn stripe_holders(prim: &Primitive, machine: &MachineDescriptor, s: usize) -> Vec<Rank> {
    let root = prim.root;
    let mut holders = vec![root];
    holders.extend(machine.node_ranks(root).map(Rank).filter(|&r| r != root).take(s - 1));
    holders
}

fn crosses_nodes(prim: &Primitive, machine: &MachineDescriptor) -> bool {
    let home = machine.node_of(prim.root);
    prim.leaves.iter().any(|&l| machine.node_of(l) != home)
}

fn routes(prim: &Primitive, machine: &MachineDescriptor, stripe: usize, ring: usize) -> Vec<StripeRoute> {
    let router = Router { machine, ring };
    let root = prim.root;
    let targets: BTreeSet<Rank> = prim.leaves.iter().copied().filter(|&l| l != root).collect();
    let s = if stripe > 1 && crosses_nodes(prim, machine) { stripe } else { 1 };
    let holders = stripe_holders(prim, machine, s);
    let base = usize::from(s > 1);

    split_balanced(prim.count, s)
        .into_iter()
        .enumerate()
        .filter(|(_, chunk)| !chunk.is_empty())
        .map(|(k, chunk)| {
            let holder = holders[k];
            let mut hops = Vec::new();
            if holder != root {
                hops.push(Hop { from: root, to: holder, stage: 0 });
            }
            let mut rest = targets.clone();
            rest.remove(&holder);
            router.distribute(holder, &rest, base, &mut hops);
            StripeRoute { stripe: k, chunk, hops }
        })
        .collect()
}

/// Transfer before level, dependency and id assignment.
struct Draft {
    src: Endpoint,
    dst: Endpoint,
    count: usize,
    op: Option<ReduceOp>,
    stage: usize,
    stripe: usize,
}

fn at(bref: &BufferRef, rank: Rank, delta: usize) -> Endpoint {
    Endpoint { rank, location: Location::Buffer(bref.buffer.clone()), offset: bref.offset + delta }
}

fn scratch(rank: Rank, index: usize, delta: usize) -> Endpoint {
    Endpoint { rank, location: Location::Scratch(index), offset: delta }
}

/// Lowers one primitive with stages relative to its own start.
fn lower_one(prim: &Primitive, index: usize, machine: &MachineDescriptor, stripe: usize, ring: usize) -> Vec<Draft> {
    let routes = routes(prim, machine, stripe, ring);
    match prim.kind {
        PrimitiveKind::Multicast => lower_multicast(prim, index, &routes),
        PrimitiveKind::Reduction(op) => lower_reduction(prim, index, op, &routes),
    }
}

fn lower_multicast(prim: &Primitive, index: usize, routes: &[StripeRoute]) -> Vec<Draft> {
    let root = prim.root;
    let mut out = Vec::new();
    for route in routes {
        let delta = route.chunk.start;
        let holding = |r: Rank| {
            if r == root {
                at(&prim.send, r, delta)
            } else if prim.leaves.contains(&r) {
                at(&prim.recv, r, delta)
            } else {
                scratch(r, index, delta)
            }
        };
        if prim.leaves.contains(&root) && !prim.in_place() {
            out.push(Draft {
                src: at(&prim.send, root, delta),
                dst: at(&prim.recv, root, delta),
                count: route.chunk.len(),
                op: None,
                stage: 0,
                stripe: route.stripe,
            });
        }
        for hop in &route.hops {
            out.push(Draft {
                src: holding(hop.from),
                dst: holding(hop.to),
                count: route.chunk.len(),
                op: None,
                stage: hop.stage,
                stripe: route.stripe,
            });
        }
    }
    out
}

fn lower_reduction(prim: &Primitive, index: usize, op: ReduceOp, routes: &[StripeRoute]) -> Vec<Draft> {
    let root = prim.root;
    let span = routes.iter().flat_map(|r| r.hops.iter()).map(|h| h.stage + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for route in routes {
        let delta = route.chunk.start;
        let count = route.chunk.len();
        let mut children: BTreeMap<Rank, usize> = BTreeMap::new();
        for hop in &route.hops {
            *children.entry(hop.from).or_default() += 1;
        }
        let has_children = |r: Rank| children.contains_key(&r);
        let output = |r: Rank| if has_children(r) { scratch(r, index, delta) } else { at(&prim.send, r, delta) };

        let root_contributes = prim.leaves.contains(&root);
        let root_inputs = children.get(&root).copied().unwrap_or(0) + usize::from(root_contributes);
        let accumulate_at_root = root_inputs >= 2;
        let draft = |src: Endpoint, dst: Endpoint, op: Option<ReduceOp>, stage: usize| Draft {
            src,
            dst,
            count,
            op,
            stage,
            stripe: route.stripe,
        };

        for &node in children.keys() {
            if node != root && prim.leaves.contains(&node) {
                out.push(draft(at(&prim.send, node, delta), scratch(node, index, delta), Some(op), 0));
            }
        }
        for hop in &route.hops {
            let stage = span - 1 - hop.stage;
            let (dst, hop_op) = if hop.from == root && !accumulate_at_root {
                (at(&prim.recv, root, delta), None)
            } else {
                (scratch(hop.from, index, delta), Some(op))
            };
            out.push(draft(output(hop.to), dst, hop_op, stage));
        }
        if accumulate_at_root {
            if root_contributes {
                out.push(draft(at(&prim.send, root, delta), scratch(root, index, delta), Some(op), 0));
            }
            out.push(draft(scratch(root, index, delta), at(&prim.recv, root, delta), None, span));
        } else if root_contributes && !prim.in_place() {
            out.push(draft(at(&prim.send, root, delta), at(&prim.recv, root, delta), None, 0));
        }
    }
    out
}

fn finish(drafts: Vec<(Draft, usize)>, machine: &MachineDescriptor) -> Vec<P2PTransfer> {
    drafts
        .into_iter()
        .map(|(d, primitive)| P2PTransfer {
            level: machine.crossing_level(d.src.rank, d.dst.rank),
            src: d.src,
            dst: d.dst,
            count: d.count,
            op: d.op,
            stage: d.stage,
            stripe: d.stripe,
            channel: 0,
            primitive,
            deps: Vec::new(),
        })
        .collect()
}

/// Tree factorization of a single primitive (no striping, no ring). Stages
/// are relative to the primitive's start; dependencies are left empty.
pub fn tree_factorize(prim: &Primitive, machine: &MachineDescriptor) -> Vec<P2PTransfer> {
    ring_factorize(prim, machine, 1)
}

/// Ring+tree factorization of a single primitive over `ring` conceptual
/// nodes; `ring == 1` is the pure tree.
pub fn ring_factorize(prim: &Primitive, machine: &MachineDescriptor, ring: usize) -> Vec<P2PTransfer> {
    let drafts = lower_one(prim, 0, machine, 1, ring).into_iter().map(|d| (d, 0)).collect();
    finish(drafts, machine)
}

/// Lowers a whole program: striping, ring and tree per primitive, steps laid
/// out consecutively, canonical ordering and range-based dependencies.
pub fn lower(
    program: &CollectiveProgram,
    machine: &MachineDescriptor,
    config: &OptimizationConfig,
) -> Result<StagedPlan, LowerError> {
    validate(program).map_err(LowerError::InvalidProgram)?;
    validate_machine(machine, program.world_size()).map_err(LowerError::InvalidMachine)?;
    validate_config(machine, config)?;

    let program = program.canonical();
    let mut drafts = Vec::new();
    let mut scratch_len = BTreeMap::new();
    let mut offset = 0;
    let mut index = 0;
    for step in program.steps() {
        let mut span = 0;
        for prim in step {
            let lowered = lower_one(prim, index, machine, config.stripe, config.ring);
            for d in lowered {
                if matches!(d.src.location, Location::Scratch(_)) || matches!(d.dst.location, Location::Scratch(_)) {
                    scratch_len.insert(index, prim.count);
                }
                span = span.max(d.stage + 1);
                drafts.push((Draft { stage: d.stage + offset, ..d }, index));
            }
            index += 1;
        }
        offset += span;
    }

    let mut transfers = finish(drafts, machine);
    transfers.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    compute_deps(&mut transfers)?;
    let num_stages = transfers.iter().map(|t| t.stage + 1).max().unwrap_or(0);
    log::debug!("lowered {} primitives into {} transfers over {num_stages} stages", index, transfers.len());

    Ok(StagedPlan {
        world_size: program.world_size(),
        buffers: program.buffers().clone(),
        scratch: scratch_len,
        num_stages,
        stripe: config.stripe,
        ring: config.ring,
        element_size: machine.element_size,
        transfers,
    })
}

/// Fills `deps` of stage-sorted transfers from overlapping accesses and
/// rejects conflicts between transfers of the same stage.
fn compute_deps(transfers: &mut [P2PTransfer]) -> Result<(), LowerError> {
    type Key = (Rank, Location);
    let mut seen: HashMap<Key, Vec<(Range<usize>, usize, AccessKind)>> = HashMap::new();
    for id in 0..transfers.len() {
        let t = &transfers[id];
        let accesses = [
            ((t.src.rank, t.src.location.clone()), t.src.range(t.count), AccessKind::Read),
            (
                (t.dst.rank, t.dst.location.clone()),
                t.dst.range(t.count),
                if t.op.is_some() { AccessKind::Accumulate } else { AccessKind::Write },
            ),
        ];
        let mut deps = BTreeSet::new();
        for (key, range, kind) in &accesses {
            if let Some(list) = seen.get(key) {
                for (r, other, other_kind) in list {
                    if kind.conflicts(*other_kind) && crate::composition::overlaps(r, range) {
                        if transfers[*other].stage >= t.stage {
                            return Err(LowerError::StageConflict { first: *other, second: id, stage: t.stage });
                        }
                        deps.insert(*other);
                    }
                }
            }
        }
        for (key, range, kind) in accesses {
            seen.entry(key).or_default().push((range, id, kind));
        }
        transfers[id].deps = deps.into_iter().collect();
    }
    Ok(())
}

/// Program-level striping: every primitive whose leaves leave the root node
/// is split into `stripe` sub-chunks, rooted at the lowest-ranked GPUs of
/// the root node, with a fence between the intra-node scatter (or, for
/// reductions, the per-stripe partial reductions) and the stripe branches.
/// Stripe roots that are not leaves stage their chunk in a new
/// `stripe<i>` buffer.
pub fn stripe_transform(
    program: &CollectiveProgram,
    machine: &MachineDescriptor,
    stripe: usize,
) -> Result<CollectiveProgram, LowerError> {
    validate(program).map_err(LowerError::InvalidProgram)?;
    validate_machine(machine, program.world_size()).map_err(LowerError::InvalidMachine)?;
    if stripe == 0 || stripe > machine.gpus_per_node {
        return Err(LowerError::StripeOutOfRange { stripe, g: machine.gpus_per_node });
    }
    if stripe == 1 {
        return Ok(program.clone());
    }

    let program = program.canonical();
    let mut buffers = program.buffers().clone();
    let mut steps = Vec::new();
    let mut index = 0;
    for step in program.steps() {
        let mut pre = Vec::new();
        let mut post = Vec::new();
        for prim in step {
            let this = index;
            index += 1;
            if !crosses_nodes(prim, machine) {
                pre.push(prim.clone());
                continue;
            }
            let staging = BufferId::new(format!("stripe{this}"));
            let stage_ref = |delta: usize| BufferRef { buffer: staging.clone(), offset: delta };
            let holders = stripe_holders(prim, machine, stripe);
            let chunks = split_balanced(prim.count, stripe);
            let root = prim.root;
            let mut used_staging = false;
            let first_len = chunks[0].len();
            let mk = |kind, root, leaves: BTreeSet<Rank>, send: BufferRef, recv: BufferRef, count| Primitive {
                kind,
                root,
                leaves,
                send,
                recv,
                count,
            };

            match prim.kind {
                PrimitiveKind::Multicast => {
                    let holding = |r: Rank, delta: usize, used: &mut bool| {
                        if prim.leaves.contains(&r) {
                            prim.recv.shifted(delta)
                        } else {
                            *used = true;
                            stage_ref(delta)
                        }
                    };
                    if prim.leaves.contains(&root) && !prim.in_place() && first_len < prim.count {
                        pre.push(mk(
                            PrimitiveKind::Multicast,
                            root,
                            [root].into(),
                            prim.send.shifted(first_len),
                            prim.recv.shifted(first_len),
                            prim.count - first_len,
                        ));
                    }
                    for (k, chunk) in chunks.iter().enumerate() {
                        if chunk.is_empty() {
                            continue;
                        }
                        let holder = holders[k];
                        let mut leaves: BTreeSet<Rank> =
                            prim.leaves.iter().copied().filter(|&l| l != root && l != holder).collect();
                        let send = if k == 0 {
                            if prim.leaves.contains(&root) && !prim.in_place() {
                                leaves.insert(root);
                            }
                            prim.send.shifted(chunk.start)
                        } else {
                            let h = holding(holder, chunk.start, &mut used_staging);
                            pre.push(mk(
                                PrimitiveKind::Multicast,
                                root,
                                [holder].into(),
                                prim.send.shifted(chunk.start),
                                h.clone(),
                                chunk.len(),
                            ));
                            h
                        };
                        if !leaves.is_empty() {
                            post.push(mk(PrimitiveKind::Multicast, holder, leaves, send, prim.recv.shifted(chunk.start), chunk.len()));
                        }
                    }
                }
                PrimitiveKind::Reduction(op) => {
                    let others: BTreeSet<Rank> = prim.leaves.iter().copied().filter(|&l| l != root).collect();
                    let root_contributes = prim.leaves.contains(&root);
                    if root_contributes && first_len < prim.count {
                        used_staging = true;
                        pre.push(mk(
                            PrimitiveKind::Multicast,
                            root,
                            [root].into(),
                            prim.send.shifted(first_len),
                            stage_ref(first_len),
                            prim.count - first_len,
                        ));
                    }
                    for (k, chunk) in chunks.iter().enumerate() {
                        if chunk.is_empty() {
                            continue;
                        }
                        if k == 0 {
                            pre.push(mk(
                                prim.kind,
                                root,
                                prim.leaves.clone(),
                                prim.send.shifted(chunk.start),
                                prim.recv.shifted(chunk.start),
                                chunk.len(),
                            ));
                            continue;
                        }
                        used_staging = true;
                        let holder = holders[k];
                        pre.push(mk(
                            prim.kind,
                            holder,
                            others.clone(),
                            prim.send.shifted(chunk.start),
                            stage_ref(chunk.start),
                            chunk.len(),
                        ));
                        let mut merge: BTreeSet<Rank> = [holder].into();
                        if root_contributes {
                            merge.insert(root);
                        }
                        post.push(mk(
                            PrimitiveKind::Reduction(op),
                            root,
                            merge,
                            stage_ref(chunk.start),
                            prim.recv.shifted(chunk.start),
                            chunk.len(),
                        ));
                    }
                }
            }
            if used_staging {
                buffers.insert(staging, BufferDecl { len: prim.count, input: false });
            }
        }
        steps.push(pre);
        if !post.is_empty() {
            steps.push(post);
        }
    }
    let out = CollectiveProgram::from_parts(program.world_size(), buffers, steps);
    validate(&out).map_err(LowerError::InvalidProgram)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::ProgramBuilder;
    use crate::machine::{Binding, LinkParams};

    pub(crate) fn machine(hierarchy: Vec<usize>, g: usize) -> MachineDescriptor {
        let levels = hierarchy.iter().map(|_| LinkParams::new(0.0, 1e9, "X")).collect();
        MachineDescriptor {
            hierarchy,
            levels,
            gpus_per_node: g,
            nics_per_node: g,
            nic_bandwidth: 1e9,
            binding: Binding::Bijective,
            element_size: 4,
        }
    }

    fn broadcast(p: usize, d: usize, root: usize) -> CollectiveProgram {
        let mut b = ProgramBuilder::new(p).unwrap();
        b.declare_buffer("send", d, true).unwrap();
        b.declare_buffer("recv", d, false).unwrap();
        b.add_multicast(BufferRef::new("send", 0), BufferRef::new("recv", 0), d, Rank(root), (0..p).filter(|&r| r != root).map(Rank))
            .unwrap();
        b.finish().unwrap()
    }

    #[test]
    fn split_balanced_remainder() {
        assert_eq!(split_balanced(10, 3), vec![0..4, 4..7, 7..10]);
        assert_eq!(split_balanced(2, 3), vec![0..1, 1..2, 2..2]);
        let parts = split_balanced(17, 5);
        assert_eq!(parts.iter().map(|r| r.len()).sum::<usize>(), 17);
    }

    #[test]
    fn singleton_leaf_is_one_transfer() {
        let mut b = ProgramBuilder::new(4).unwrap();
        b.declare_buffer("send", 2, true).unwrap();
        b.declare_buffer("recv", 2, false).unwrap();
        b.add_reduction(BufferRef::new("send", 0), BufferRef::new("recv", 0), 2, [Rank(3)], Rank(1), ReduceOp::Sum)
            .unwrap();
        let prog = b.finish().unwrap();
        let plan = lower(&prog, &machine(vec![4], 4), &OptimizationConfig::default()).unwrap();
        assert_eq!(plan.transfers.len(), 1);
        assert_eq!(plan.transfers[0].op, None);
    }

    #[test]
    fn direct_broadcast_one_stage() {
        let plan = lower(&broadcast(6, 3, 0), &machine(vec![6], 3), &OptimizationConfig::default()).unwrap();
        assert_eq!(plan.num_stages, 1);
        assert_eq!(plan.transfers.len(), 5);
        assert!(plan.transfers.iter().all(|t| t.src.rank == Rank(0)));
    }

    #[test]
    fn striped_tree_and_ring_stage_counts() {
        let tree = lower(&broadcast(12, 9, 0), &machine(vec![2, 2, 3], 3), &OptimizationConfig::new(3, 1, 1)).unwrap();
        assert_eq!(tree.num_stages, 4);
        let stage0: Vec<_> = tree.transfers.iter().filter(|t| t.stage == 0).collect();
        assert_eq!(stage0.len(), 2);
        assert!(stage0.iter().all(|t| t.src.rank == Rank(0) && t.count == 3 && t.level == 3));

        let ring = lower(&broadcast(12, 9, 0), &machine(vec![4, 3], 3), &OptimizationConfig::new(3, 4, 1)).unwrap();
        assert_eq!(ring.num_stages, 5);
    }

    #[test]
    fn fences_are_fine_grained() {
        let spec = crate::presets::CollectiveSpec::new(
            crate::presets::CollectiveKind::AllReduce,
            crate::presets::Formulation::Multi,
            2,
        );
        let prog = crate::presets::build(&spec, 3).unwrap();
        let plan = lower(&prog, &machine(vec![3], 3), &OptimizationConfig::default()).unwrap();
        // Canonical order puts the three reductions first (indices 0..3), then
        // the multicasts rooted at 0, 1, 2 (indices 3..6).
        for t in &plan.transfers {
            if t.primitive >= 3 {
                let j = t.primitive - 3;
                for &d in &t.deps {
                    let dep = &plan.transfers[d];
                    assert!(dep.primitive == t.primitive || dep.primitive == j, "M{j} depends on primitive {}", dep.primitive);
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        let m = machine(vec![2, 2, 3], 3);
        assert!(matches!(validate_config(&m, &OptimizationConfig::new(4, 1, 1)), Err(LowerError::StripeOutOfRange { .. })));
        assert!(matches!(validate_config(&m, &OptimizationConfig::new(1, 8, 1)), Err(LowerError::RingTooLarge { .. })));
        assert!(matches!(validate_config(&m, &OptimizationConfig::new(1, 3, 1)), Err(LowerError::RingIndivisible { .. })));
        assert!(validate_config(&m, &OptimizationConfig::new(3, 4, 1)).is_ok());
        assert!(validate_config(&m, &OptimizationConfig::new(3, 2, 1)).is_ok());
    }

    #[test]
    fn stripe_transform_structure() {
        let m = machine(vec![2, 2, 3], 3);
        let prog = broadcast(12, 9, 0);
        assert_eq!(stripe_transform(&prog, &m, 1).unwrap(), prog);
        let striped = stripe_transform(&prog, &m, 3).unwrap();
        assert_eq!(striped.steps().len(), 2);
        let pre = &striped.steps()[0];
        assert_eq!(pre.len(), 2);
        for (prim, holder) in pre.iter().zip([1, 2]) {
            assert_eq!(prim.root, Rank(0));
            assert_eq!(prim.leaves, [Rank(holder)].into());
            assert_eq!(prim.count, 3);
        }
        let post = &striped.steps()[1];
        assert_eq!(post.iter().map(|p| p.root).collect::<Vec<_>>(), vec![Rank(0), Rank(1), Rank(2)]);
    }

    #[test]
    fn root_only_reduction_is_free() {
        let mut b = ProgramBuilder::new(4).unwrap();
        b.declare_buffer("x", 3, true).unwrap();
        b.add_reduction(BufferRef::new("x", 0), BufferRef::new("x", 0), 3, [Rank(2)], Rank(2), ReduceOp::Sum)
            .unwrap();
        let plan = lower(&b.finish().unwrap(), &machine(vec![2, 2], 2), &OptimizationConfig::default()).unwrap();
        assert!(plan.transfers.is_empty());
    }

    #[test]
    fn reduction_mirrors_the_tree() {
        let mut b = ProgramBuilder::new(6).unwrap();
        b.declare_buffer("send", 2, true).unwrap();
        b.declare_buffer("recv", 2, false).unwrap();
        b.add_reduction(BufferRef::new("send", 0), BufferRef::new("recv", 0), 2, (0..6).map(Rank), Rank(0), ReduceOp::Sum)
            .unwrap();
        let prog = b.finish().unwrap();
        let m = machine(vec![2, 3], 3);
        let plan = lower(&prog, &m, &OptimizationConfig::default()).unwrap();
        // One inter-node hop carries the remote node's partial.
        let inter: Vec<_> = plan.transfers.iter().filter(|t| t.level == 1).collect();
        assert_eq!(inter.len(), 1);
        assert_eq!((inter[0].src.rank, inter[0].dst.rank), (Rank(3), Rank(0)));
        assert_eq!(inter[0].src.location, Location::Scratch(0));
        // The remote partial is complete before it leaves the node.
        let before: Vec<_> = plan.transfers.iter().filter(|t| t.stage < inter[0].stage && t.dst.rank == Rank(3)).collect();
        assert_eq!(before.len(), 3);
        assert_eq!(crate::engine::execute_plan(&plan).unwrap(), crate::engine::execute_program(&prog).unwrap());
    }

    #[test]
    fn all_to_all_levels() {
        let spec = crate::presets::CollectiveSpec::new(
            crate::presets::CollectiveKind::AllToAll,
            crate::presets::Formulation::Single,
            1,
        );
        let prog = crate::presets::build(&spec, 12).unwrap();
        let m = machine(vec![2, 2, 3], 3);
        let plan = lower(&prog, &m, &OptimizationConfig::default()).unwrap();
        for t in plan.transfers.iter().filter(|t| !t.is_local()) {
            assert_eq!(t.level, m.crossing_level(t.src.rank, t.dst.rank));
        }
        // Every pair exchanges directly: p(p-1) remote transfers.
        assert_eq!(plan.transfers.iter().filter(|t| !t.is_local()).count(), 12 * 11);
    }
}
