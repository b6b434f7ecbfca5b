//! The eight standard collectives expressed with primitives, in single-step
//! and two-step formulations, plus their ground-truth final states.
//!
//! Buffer layout: every rank declares `send` (input) and `recv`; symmetric
//! collectives use `p * count` elements with chunk `j` at offset `j * count`.
//! The two-step reduce-scatter additionally stages the full reduction in a
//! `tmp` buffer on the root.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{
    BufferId, BufferRef, CollectiveProgram, CompositionError, ProgramBuilder, Rank, ReduceOp,
};
use crate::engine::{SymbolicState, SymbolicValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    Scatter,
    Broadcast,
    Gather,
    Reduce,
    AllToAll,
    AllGather,
    ReduceScatter,
    AllReduce,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 8] = [
        CollectiveKind::Scatter,
        CollectiveKind::Broadcast,
        CollectiveKind::Gather,
        CollectiveKind::Reduce,
        CollectiveKind::AllToAll,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::AllReduce,
    ];

    pub fn is_rooted(self) -> bool {
        matches!(
            self,
            CollectiveKind::Scatter | CollectiveKind::Broadcast | CollectiveKind::Gather | CollectiveKind::Reduce
        )
    }

    pub fn reduces(self) -> bool {
        matches!(self, CollectiveKind::Reduce | CollectiveKind::ReduceScatter | CollectiveKind::AllReduce)
    }

    pub fn formulations(self) -> &'static [Formulation] {
        match self {
            CollectiveKind::Scatter | CollectiveKind::Gather | CollectiveKind::AllToAll => &[Formulation::Single],
            CollectiveKind::AllReduce => {
                &[Formulation::Single, Formulation::Multi, Formulation::MultiAlt]
            }
            _ => &[Formulation::Single, Formulation::Multi],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Scatter => "scatter",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::Gather => "gather",
            CollectiveKind::Reduce => "reduce",
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::AllReduce => "all_reduce",
        }
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CollectiveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
        CollectiveKind::ALL
            .into_iter()
            .find(|k| k.name().replace('_', "") == compact)
            .ok_or_else(|| format!("unknown collective: {s}"))
    }
}

/// How a collective is composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// One step of concurrent primitives.
    Single,
    /// Two steps separated by a fence. All-reduce uses All-gather . Reduce-scatter.
    Multi,
    /// All-reduce as Broadcast . Reduce.
    MultiAlt,
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Formulation::Single => "single",
            Formulation::Multi => "multi",
            Formulation::MultiAlt => "multi-alt",
        })
    }
}

impl FromStr for Formulation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" | "single_step" | "single-step" => Ok(Formulation::Single),
            "multi" | "multi_step" | "multi-step" => Ok(Formulation::Multi),
            "multi-alt" | "multi_alt" => Ok(Formulation::MultiAlt),
            other => Err(format!("unknown formulation: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectiveSpec {
    pub kind: CollectiveKind,
    pub formulation: Formulation,
    /// Root for rooted collectives; also the pivot rank of two-step
    /// formulations that funnel through one rank.
    pub root: Rank,
    /// Per-rank payload `d` in elements.
    pub count: usize,
    pub op: ReduceOp,
}

impl CollectiveSpec {
    pub fn new(kind: CollectiveKind, formulation: Formulation, count: usize) -> Self {
        CollectiveSpec { kind, formulation, root: Rank(0), count, op: ReduceOp::Sum }
    }

    pub fn with_root(mut self, root: Rank) -> Self {
        self.root = root;
        self
    }

    pub fn with_op(mut self, op: ReduceOp) -> Self {
        self.op = op;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PresetError {
    #[error("{kind} has no {formulation} formulation")]
    UnsupportedFormulation { kind: CollectiveKind, formulation: Formulation },
    #[error("world size must be at least 1")]
    EmptyWorld,
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("root {root} out of range for world size {p}")]
    RootOutOfRange { root: Rank, p: usize },
    #[error(transparent)]
    Composition(#[from] CompositionError),
}

fn at(buffer: &str, offset: usize) -> BufferRef {
    BufferRef::new(buffer, offset)
}

fn all(p: usize) -> Vec<Rank> {
    (0..p).map(Rank).collect()
}

fn others(p: usize, i: usize) -> Vec<Rank> {
    (0..p).filter(|&r| r != i).map(Rank).collect()
}

/// Declared `(send, recv)` lengths for a collective.
fn buffer_lengths(kind: CollectiveKind, p: usize, d: usize) -> (usize, usize) {
    use CollectiveKind::*;
    match kind {
        Broadcast | Reduce | AllReduce | AllToAll => (d * p, d * p),
        AllGather | Gather => (d, d * p),
        ReduceScatter | Scatter => (d * p, d),
    }
}

/// Builds the program for `spec` on `p` ranks.
pub fn build(spec: &CollectiveSpec, p: usize) -> Result<CollectiveProgram, PresetError> {
    use CollectiveKind::*;
    if p == 0 {
        return Err(PresetError::EmptyWorld);
    }
    if spec.count == 0 {
        return Err(PresetError::ZeroCount);
    }
    if spec.root.0 >= p {
        return Err(PresetError::RootOutOfRange { root: spec.root, p });
    }
    if !spec.kind.formulations().contains(&spec.formulation) {
        return Err(PresetError::UnsupportedFormulation { kind: spec.kind, formulation: spec.formulation });
    }

    let d = spec.count;
    let root = spec.root;
    let op = spec.op;
    let (send_len, recv_len) = buffer_lengths(spec.kind, p, d);
    let mut b = ProgramBuilder::new(p)?;
    b.declare_buffer("send", send_len, true)?;
    b.declare_buffer("recv", recv_len, false)?;

    match (spec.kind, spec.formulation) {
        (Broadcast, Formulation::Single) => {
            b.add_multicast(at("send", 0), at("recv", 0), d * p, root, all(p))?;
        }
        (Reduce, Formulation::Single) => {
            b.add_reduction(at("send", 0), at("recv", 0), d * p, all(p), root, op)?;
        }
        (AllGather, Formulation::Single) => {
            for i in 0..p {
                b.add_multicast(at("send", 0), at("recv", i * d), d, Rank(i), all(p))?;
            }
        }
        (ReduceScatter, Formulation::Single) => {
            for j in 0..p {
                b.add_reduction(at("send", j * d), at("recv", 0), d, all(p), Rank(j), op)?;
            }
        }
        (AllReduce, Formulation::Single) => {
            for j in 0..p {
                b.add_reduction(at("send", 0), at("recv", 0), d * p, all(p), Rank(j), op)?;
            }
        }
        (Scatter, Formulation::Single) => {
            for j in 0..p {
                b.add_multicast(at("send", j * d), at("recv", 0), d, root, [Rank(j)])?;
            }
        }
        (Gather, Formulation::Single) => {
            for i in 0..p {
                b.add_multicast(at("send", 0), at("recv", i * d), d, Rank(i), [root])?;
            }
        }
        (AllToAll, Formulation::Single) => {
            for i in 0..p {
                for j in 0..p {
                    b.add_multicast(at("send", j * d), at("recv", i * d), d, Rank(i), [Rank(j)])?;
                }
            }
        }
        (Broadcast, Formulation::Multi) => {
            // Scatter, then an in-place All-gather.
            for j in 0..p {
                b.add_multicast(at("send", j * d), at("recv", j * d), d, root, [Rank(j)])?;
            }
            if p > 1 {
                b.add_fence()?;
                for j in 0..p {
                    b.add_multicast(at("recv", j * d), at("recv", j * d), d, Rank(j), others(p, j))?;
                }
            }
        }
        (Reduce, Formulation::Multi) => {
            // Reduce-scatter, then Gather into the root.
            for j in 0..p {
                b.add_reduction(at("send", j * d), at("recv", j * d), d, all(p), Rank(j), op)?;
            }
            if p > 1 {
                b.add_fence()?;
                for i in (0..p).filter(|&i| i != root.0) {
                    b.add_multicast(at("recv", i * d), at("recv", i * d), d, Rank(i), [root])?;
                }
            }
        }
        (AllGather, Formulation::Multi) => {
            // Gather into the root, then Broadcast in place.
            for i in 0..p {
                b.add_multicast(at("send", 0), at("recv", i * d), d, Rank(i), [root])?;
            }
            if p > 1 {
                b.add_fence()?;
                b.add_multicast(at("recv", 0), at("recv", 0), d * p, root, others(p, root.0))?;
            }
        }
        (ReduceScatter, Formulation::Multi) => {
            // Reduce into the root's staging buffer, then Scatter.
            b.declare_buffer("tmp", d * p, false)?;
            b.add_reduction(at("send", 0), at("tmp", 0), d * p, all(p), root, op)?;
            b.add_fence()?;
            for j in 0..p {
                b.add_multicast(at("tmp", j * d), at("recv", 0), d, root, [Rank(j)])?;
            }
        }
        (AllReduce, Formulation::Multi) => {
            for j in 0..p {
                b.add_reduction(at("send", j * d), at("recv", j * d), d, all(p), Rank(j), op)?;
            }
            if p > 1 {
                b.add_fence()?;
                for i in 0..p {
                    b.add_multicast(at("recv", i * d), at("recv", i * d), d, Rank(i), others(p, i))?;
                }
            }
        }
        (AllReduce, Formulation::MultiAlt) => {
            b.add_reduction(at("send", 0), at("recv", 0), d * p, all(p), root, op)?;
            if p > 1 {
                b.add_fence()?;
                b.add_multicast(at("recv", 0), at("recv", 0), d * p, root, others(p, root.0))?;
            }
        }
        (kind, formulation) => return Err(PresetError::UnsupportedFormulation { kind, formulation }),
    }
    Ok(b.finish()?)
}

/// Expected final contents of `send` and `recv` on every rank, straight from
/// the definition of each collective. Elements the collective leaves
/// unspecified are `None`.
pub fn reference_semantics(spec: &CollectiveSpec, p: usize) -> SymbolicState {
    use CollectiveKind::*;
    let d = spec.count;
    let root = spec.root;
    let (send_len, recv_len) = buffer_lengths(spec.kind, p, d);
    let send = BufferId::new("send");
    let atom = |origin: usize, index: usize| Some(SymbolicValue::atom(Rank(origin), send.clone(), index));
    let reduced = |index: usize| {
        let terms = (0..p).map(|l| SymbolicValue::atom(Rank(l), send.clone(), index));
        Some(SymbolicValue::reduce_all(spec.op, terms).expect("p >= 1"))
    };

    let mut send_state = Vec::with_capacity(p);
    let mut recv_state = Vec::with_capacity(p);
    for r in 0..p {
        send_state.push((0..send_len).map(|e| atom(r, e)).collect::<Vec<_>>());
        let recv: Vec<Option<SymbolicValue>> = (0..recv_len)
            .map(|e| match spec.kind {
                Broadcast => atom(root.0, e),
                Reduce => (r == root.0).then(|| reduced(e)).flatten(),
                AllGather => atom(e / d, e % d),
                ReduceScatter => reduced(r * d + e),
                AllReduce => reduced(e),
                Scatter => atom(root.0, r * d + e),
                Gather => (r == root.0).then(|| atom(e / d, e % d)).flatten(),
                AllToAll => atom(e / d, r * d + e % d),
            })
            .collect();
        recv_state.push(recv);
    }

    let mut buffers = BTreeMap::new();
    buffers.insert(send, send_state);
    buffers.insert(BufferId::new("recv"), recv_state);
    SymbolicState::from_buffers(p, buffers)
}
