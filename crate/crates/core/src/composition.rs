//! Machine-agnostic collective programs built from multicast, reduction and
//! fence primitives.
//!
//! A [`CollectiveProgram`] is an ordered list of steps. Primitives inside a
//! step run concurrently and must be race-free; a fence closes a step and
//! makes the next step depend on the data the previous steps produced.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a GPU endpoint, `0 <= rank < world_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rank(pub usize);

impl Rank {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Name of a per-rank buffer. Every rank owns one instance of each declared
/// buffer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BufferId(pub String);

impl BufferId {
    pub fn new(name: impl Into<String>) -> Self {
        BufferId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for BufferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A position inside a per-rank buffer, in elements.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BufferRef {
    pub buffer: BufferId,
    pub offset: usize,
}

impl BufferRef {
    pub fn new(buffer: impl Into<String>, offset: usize) -> Self {
        BufferRef { buffer: BufferId::new(buffer), offset }
    }

    pub fn range(&self, count: usize) -> Range<usize> {
        self.offset..self.offset + count
    }

    pub fn shifted(&self, delta: usize) -> Self {
        BufferRef { buffer: self.buffer.clone(), offset: self.offset + delta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    Sum,
    Max,
}

impl fmt::Display for ReduceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReduceOp::Sum => f.write_str("sum"),
            ReduceOp::Max => f.write_str("max"),
        }
    }
}

impl std::str::FromStr for ReduceOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(ReduceOp::Sum),
            "max" => Ok(ReduceOp::Max),
            other => Err(format!("unknown reduce op: {other}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// The root replicates its send range into the recv range of every leaf.
    Multicast,
    /// Every leaf's send range is folded with the op into the root's recv range.
    Reduction(ReduceOp),
}

/// One multicast or reduction.
///
/// Leaves may contain the root. For a multicast that means a local copy of
/// the root's send range into its own recv range (elided when the two are
/// the same range); for a reduction the root contributes its own send range.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub root: Rank,
    pub leaves: BTreeSet<Rank>,
    pub send: BufferRef,
    pub recv: BufferRef,
    pub count: usize,
}

/// A `(rank, buffer, element range)` touched by a primitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Access {
    pub rank: Rank,
    pub buffer: BufferId,
    pub range: Range<usize>,
}

impl Primitive {
    pub fn is_multicast(&self) -> bool {
        matches!(self.kind, PrimitiveKind::Multicast)
    }

    pub fn op(&self) -> Option<ReduceOp> {
        match self.kind {
            PrimitiveKind::Multicast => None,
            PrimitiveKind::Reduction(op) => Some(op),
        }
    }

    /// True when the root's send and recv ranges coincide.
    pub fn in_place(&self) -> bool {
        self.send == self.recv
    }

    pub fn reads(&self) -> Vec<Access> {
        match self.kind {
            PrimitiveKind::Multicast => vec![Access {
                rank: self.root,
                buffer: self.send.buffer.clone(),
                range: self.send.range(self.count),
            }],
            PrimitiveKind::Reduction(_) => self
                .leaves
                .iter()
                .map(|&leaf| Access {
                    rank: leaf,
                    buffer: self.send.buffer.clone(),
                    range: self.send.range(self.count),
                })
                .collect(),
        }
    }

    pub fn writes(&self) -> Vec<Access> {
        match self.kind {
            PrimitiveKind::Multicast => self
                .leaves
                .iter()
                .filter(|&&leaf| !(leaf == self.root && self.in_place()))
                .map(|&leaf| Access {
                    rank: leaf,
                    buffer: self.recv.buffer.clone(),
                    range: self.recv.range(self.count),
                })
                .collect(),
            PrimitiveKind::Reduction(_) => {
                if self.leaves.len() == 1 && self.leaves.contains(&self.root) && self.in_place() {
                    Vec::new()
                } else {
                    vec![Access {
                        rank: self.root,
                        buffer: self.recv.buffer.clone(),
                        range: self.recv.range(self.count),
                    }]
                }
            }
        }
    }

    /// Every rank the primitive mentions.
    pub fn ranks(&self) -> impl Iterator<Item = Rank> + '_ {
        std::iter::once(self.root).chain(self.leaves.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferDecl {
    pub len: usize,
    /// Input buffers hold initial per-rank data; other buffers start undefined.
    pub input: bool,
}

/// A validated, immutable collective program.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveProgram {
    world_size: usize,
    buffers: BTreeMap<BufferId, BufferDecl>,
    steps: Vec<Vec<Primitive>>,
}

impl CollectiveProgram {
    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn buffers(&self) -> &BTreeMap<BufferId, BufferDecl> {
        &self.buffers
    }

    pub fn steps(&self) -> &[Vec<Primitive>] {
        &self.steps
    }

    pub fn num_primitives(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn primitives(&self) -> impl Iterator<Item = (usize, &Primitive)> {
        self.steps.iter().enumerate().flat_map(|(s, prims)| prims.iter().map(move |p| (s, p)))
    }

    /// Same program with every step's primitives in canonical order.
    /// Parallel composition is order-insensitive, so this never changes
    /// semantics.
    pub fn canonical(&self) -> CollectiveProgram {
        let mut out = self.clone();
        for step in &mut out.steps {
            step.sort();
        }
        out
    }

    /// Assembles a program from parts without builder checks. Callers are
    /// expected to run [`validate`] on the result.
    pub fn from_parts(
        world_size: usize,
        buffers: BTreeMap<BufferId, BufferDecl>,
        steps: Vec<Vec<Primitive>>,
    ) -> Self {
        CollectiveProgram { world_size, buffers, steps }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompositionError {
    #[error("world size must be positive")]
    EmptyWorld,
    #[error("leaf set is empty")]
    EmptyLeafSet,
    #[error("rank {rank} out of range for world size {world_size}")]
    RankOutOfRange { rank: Rank, world_size: usize },
    #[error("element count must be positive")]
    ZeroCount,
    #[error("buffer `{0}` is not declared")]
    UnknownBuffer(BufferId),
    #[error("buffer `{buffer}` already declared")]
    DuplicateBuffer { buffer: BufferId },
    #[error("range {range:?} exceeds buffer `{buffer}` of length {len}")]
    RangeOutOfBounds { buffer: BufferId, range: Range<usize>, len: usize },
    #[error("fence on an empty step")]
    EmptyStep,
    #[error("root send and recv ranges partially overlap")]
    PartialSelfOverlap,
    #[error("{0}")]
    Race(Violation),
}

/// A problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Violation {
    #[error("step {step} primitive {index}: rank {rank} out of range")]
    RankOutOfRange { step: usize, index: usize, rank: Rank },
    #[error("step {step} primitive {index}: empty leaf set")]
    EmptyLeafSet { step: usize, index: usize },
    #[error("step {step} primitive {index}: zero element count")]
    ZeroCount { step: usize, index: usize },
    #[error("step {step} primitive {index}: unknown buffer `{buffer}`")]
    UnknownBuffer { step: usize, index: usize, buffer: BufferId },
    #[error("step {step} primitive {index}: range {range:?} exceeds buffer `{buffer}`")]
    RangeOutOfBounds { step: usize, index: usize, buffer: BufferId, range: Range<usize> },
    #[error("step {step} primitive {index}: root send and recv ranges partially overlap")]
    PartialSelfOverlap { step: usize, index: usize },
    #[error("step {step} is empty")]
    EmptyStep { step: usize },
    #[error("step {step}: primitives {first} and {second} both write rank {rank} `{buffer}`")]
    WriteWriteRace { step: usize, first: usize, second: usize, rank: Rank, buffer: BufferId },
    #[error("step {step}: primitive {reader} reads what {writer} writes on rank {rank} `{buffer}`")]
    ReadWriteRace { step: usize, reader: usize, writer: usize, rank: Rank, buffer: BufferId },
    #[error("step {step} primitive {index}: rank {rank} reads never-written `{buffer}` {range:?}")]
    UninitializedRead { step: usize, index: usize, rank: Rank, buffer: BufferId, range: Range<usize> },
}

pub(crate) fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

/// Per-step index of accesses keyed by `(rank, buffer)`, used for race checks.
#[derive(Default)]
struct StepIndex {
    entries: HashMap<(Rank, BufferId), Vec<(Range<usize>, usize, bool)>>,
}

impl StepIndex {
    fn conflicts(&self, index: usize, prim: &Primitive, step: usize) -> Vec<Violation> {
        let mut found = Vec::new();
        let mut check = |acc: &Access, is_write: bool| {
            if let Some(list) = self.entries.get(&(acc.rank, acc.buffer.clone())) {
                for (range, other, other_write) in list {
                    if *other == index || !overlaps(range, &acc.range) {
                        continue;
                    }
                    match (is_write, *other_write) {
                        (true, true) => found.push(Violation::WriteWriteRace {
                            step,
                            first: *other,
                            second: index,
                            rank: acc.rank,
                            buffer: acc.buffer.clone(),
                        }),
                        (true, false) => found.push(Violation::ReadWriteRace {
                            step,
                            reader: *other,
                            writer: index,
                            rank: acc.rank,
                            buffer: acc.buffer.clone(),
                        }),
                        (false, true) => found.push(Violation::ReadWriteRace {
                            step,
                            reader: index,
                            writer: *other,
                            rank: acc.rank,
                            buffer: acc.buffer.clone(),
                        }),
                        (false, false) => {}
                    }
                }
            }
        };
        for acc in prim.writes() {
            check(&acc, true);
        }
        for acc in prim.reads() {
            check(&acc, false);
        }
        found
    }

    fn insert(&mut self, index: usize, prim: &Primitive) {
        for acc in prim.writes() {
            self.entries.entry((acc.rank, acc.buffer)).or_default().push((acc.range, index, true));
        }
        for acc in prim.reads() {
            self.entries.entry((acc.rank, acc.buffer)).or_default().push((acc.range, index, false));
        }
    }
}

/// Single-owner builder mirroring the registration API:
/// `add_multicast`, `add_reduction`, `add_fence`.
#[derive(Debug)]
pub struct ProgramBuilder {
    world_size: usize,
    buffers: BTreeMap<BufferId, BufferDecl>,
    steps: Vec<Vec<Primitive>>,
}

impl ProgramBuilder {
    pub fn new(world_size: usize) -> Result<Self, CompositionError> {
        if world_size == 0 {
            return Err(CompositionError::EmptyWorld);
        }
        Ok(ProgramBuilder { world_size, buffers: BTreeMap::new(), steps: vec![Vec::new()] })
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn declare_buffer(
        &mut self,
        name: impl Into<String>,
        len: usize,
        input: bool,
    ) -> Result<&mut Self, CompositionError> {
        let id = BufferId::new(name);
        if self.buffers.contains_key(&id) {
            return Err(CompositionError::DuplicateBuffer { buffer: id });
        }
        self.buffers.insert(id, BufferDecl { len, input });
        Ok(self)
    }

    pub fn add_multicast(
        &mut self,
        send: BufferRef,
        recv: BufferRef,
        count: usize,
        root: Rank,
        leaves: impl IntoIterator<Item = Rank>,
    ) -> Result<&mut Self, CompositionError> {
        let prim = Primitive {
            kind: PrimitiveKind::Multicast,
            root,
            leaves: leaves.into_iter().collect(),
            send,
            recv,
            count,
        };
        self.push(prim)
    }

    pub fn add_reduction(
        &mut self,
        send: BufferRef,
        recv: BufferRef,
        count: usize,
        leaves: impl IntoIterator<Item = Rank>,
        root: Rank,
        op: ReduceOp,
    ) -> Result<&mut Self, CompositionError> {
        let prim = Primitive {
            kind: PrimitiveKind::Reduction(op),
            root,
            leaves: leaves.into_iter().collect(),
            send,
            recv,
            count,
        };
        self.push(prim)
    }

    pub fn add_fence(&mut self) -> Result<&mut Self, CompositionError> {
        if self.steps.last().is_none_or(Vec::is_empty) {
            return Err(CompositionError::EmptyStep);
        }
        self.steps.push(Vec::new());
        Ok(self)
    }

    /// Appends an already constructed primitive to the current step.
    pub fn push(&mut self, prim: Primitive) -> Result<&mut Self, CompositionError> {
        self.check_shape(&prim)?;
        let step = self.steps.len() - 1;
        let current = self.steps.last().expect("builder always has a current step");
        let mut index = StepIndex::default();
        for (i, p) in current.iter().enumerate() {
            index.insert(i, p);
        }
        if let Some(v) = index.conflicts(current.len(), &prim, step).into_iter().next() {
            return Err(CompositionError::Race(v));
        }
        self.steps.last_mut().expect("current step").push(prim);
        Ok(self)
    }

    fn check_shape(&self, prim: &Primitive) -> Result<(), CompositionError> {
        if prim.leaves.is_empty() {
            return Err(CompositionError::EmptyLeafSet);
        }
        if prim.count == 0 {
            return Err(CompositionError::ZeroCount);
        }
        for rank in prim.ranks() {
            if rank.0 >= self.world_size {
                return Err(CompositionError::RankOutOfRange { rank, world_size: self.world_size });
            }
        }
        for bref in [&prim.send, &prim.recv] {
            let decl = self
                .buffers
                .get(&bref.buffer)
                .ok_or_else(|| CompositionError::UnknownBuffer(bref.buffer.clone()))?;
            let range = bref.range(prim.count);
            if range.end > decl.len {
                return Err(CompositionError::RangeOutOfBounds {
                    buffer: bref.buffer.clone(),
                    range,
                    len: decl.len,
                });
            }
        }
        if partial_self_overlap(prim) {
            return Err(CompositionError::PartialSelfOverlap);
        }
        Ok(())
    }

    /// Closes the builder. A trailing fence (empty final step) is rejected;
    /// a builder with no primitives yields the empty no-op program.
    pub fn finish(mut self) -> Result<CollectiveProgram, CompositionError> {
        if self.steps.len() == 1 && self.steps[0].is_empty() {
            self.steps.clear();
        } else if self.steps.last().is_some_and(Vec::is_empty) {
            return Err(CompositionError::EmptyStep);
        }
        let program = CollectiveProgram {
            world_size: self.world_size,
            buffers: self.buffers,
            steps: self.steps,
        };
        if let Err(mut violations) = validate(&program) {
            return Err(CompositionError::Race(violations.remove(0)));
        }
        Ok(program)
    }
}

fn partial_self_overlap(prim: &Primitive) -> bool {
    let root_reads_and_writes = match prim.kind {
        PrimitiveKind::Multicast => prim.leaves.contains(&prim.root),
        PrimitiveKind::Reduction(_) => false,
    };
    root_reads_and_writes
        && prim.send.buffer == prim.recv.buffer
        && prim.send != prim.recv
        && overlaps(&prim.send.range(prim.count), &prim.recv.range(prim.count))
}

/// Sorted, merged set of half-open ranges.
#[derive(Debug, Clone, Default)]
pub(crate) struct RangeSet(Vec<Range<usize>>);

impl RangeSet {
    pub(crate) fn full(len: usize) -> Self {
        if len == 0 {
            RangeSet(Vec::new())
        } else {
            RangeSet(vec![0..len])
        }
    }

    pub(crate) fn insert(&mut self, r: Range<usize>) {
        if r.is_empty() {
            return;
        }
        self.0.push(r);
        self.0.sort_by_key(|r| r.start);
        let mut merged: Vec<Range<usize>> = Vec::with_capacity(self.0.len());
        for r in self.0.drain(..) {
            match merged.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => merged.push(r),
            }
        }
        self.0 = merged;
    }

    pub(crate) fn covers(&self, r: &Range<usize>) -> bool {
        r.is_empty() || self.0.iter().any(|s| s.start <= r.start && r.end <= s.end)
    }
}

/// Reports every violation in the program: malformed primitives,
/// intra-step races, empty steps and reads of data no earlier step wrote.
pub fn validate(program: &CollectiveProgram) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut written: HashMap<(Rank, BufferId), RangeSet> = HashMap::new();
    for (id, decl) in &program.buffers {
        if decl.input {
            for r in 0..program.world_size {
                written.insert((Rank(r), id.clone()), RangeSet::full(decl.len));
            }
        }
    }

    for (step, prims) in program.steps.iter().enumerate() {
        if prims.is_empty() {
            violations.push(Violation::EmptyStep { step });
            continue;
        }
        let mut shape_ok = vec![true; prims.len()];
        for (index, prim) in prims.iter().enumerate() {
            let before = violations.len();
            shape_violations(program, step, index, prim, &mut violations);
            shape_ok[index] = violations.len() == before;
        }

        let mut idx = StepIndex::default();
        for (index, prim) in prims.iter().enumerate() {
            if !shape_ok[index] {
                continue;
            }
            violations.extend(idx.conflicts(index, prim, step));
            idx.insert(index, prim);
        }

        for (index, prim) in prims.iter().enumerate() {
            if !shape_ok[index] {
                continue;
            }
            for acc in prim.reads() {
                let ok = written
                    .get(&(acc.rank, acc.buffer.clone()))
                    .is_some_and(|set| set.covers(&acc.range));
                if !ok {
                    violations.push(Violation::UninitializedRead {
                        step,
                        index,
                        rank: acc.rank,
                        buffer: acc.buffer,
                        range: acc.range,
                    });
                }
            }
        }
        for (index, prim) in prims.iter().enumerate() {
            if !shape_ok[index] {
                continue;
            }
            for acc in prim.writes() {
                written.entry((acc.rank, acc.buffer)).or_default().insert(acc.range);
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn shape_violations(
    program: &CollectiveProgram,
    step: usize,
    index: usize,
    prim: &Primitive,
    out: &mut Vec<Violation>,
) {
    if prim.leaves.is_empty() {
        out.push(Violation::EmptyLeafSet { step, index });
    }
    if prim.count == 0 {
        out.push(Violation::ZeroCount { step, index });
    }
    for rank in prim.ranks() {
        if rank.0 >= program.world_size {
            out.push(Violation::RankOutOfRange { step, index, rank });
        }
    }
    for bref in [&prim.send, &prim.recv] {
        match program.buffers.get(&bref.buffer) {
            None => out.push(Violation::UnknownBuffer { step, index, buffer: bref.buffer.clone() }),
            Some(decl) => {
                let range = bref.range(prim.count);
                if range.end > decl.len {
                    out.push(Violation::RangeOutOfBounds {
                        step,
                        index,
                        buffer: bref.buffer.clone(),
                        range,
                    });
                }
            }
        }
    }
    if partial_self_overlap(prim) {
        out.push(Violation::PartialSelfOverlap { step, index });
    }
}
