//! Symbolic execution of programs and plans.
//!
//! Elements are symbolic terms: an atom names the input element it came
//! from, a reduced term is a canonical multiset of atoms under one op.
//! Two executions agree when every buffer element holds the same term, so
//! the engine checks both data movement and reduction contents without any
//! floating-point noise.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::composition::{BufferId, CollectiveProgram, PrimitiveKind, Rank, ReduceOp};
use crate::factorize::{Location, P2PTransfer, StagedPlan};
use crate::pipeline::PipelinedPlan;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Term {
    Atom { origin: Rank, buffer: BufferId, index: usize },
    Reduced { op: ReduceOp, terms: Vec<SymbolicValue> },
}

/// Value of one buffer element. Cheap to clone.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SymbolicValue(Arc<Term>);

impl SymbolicValue {
    pub fn atom(origin: Rank, buffer: BufferId, index: usize) -> Self {
        SymbolicValue(Arc::new(Term::Atom { origin, buffer, index }))
    }

    /// `a op b`, flattened, sorted, and deduplicated for idempotent ops.
    pub fn reduce(op: ReduceOp, a: &SymbolicValue, b: &SymbolicValue) -> Self {
        Self::reduce_all(op, [a.clone(), b.clone()]).expect("two operands")
    }

    /// Reduction of all `values`; `None` for an empty iterator.
    pub fn reduce_all(op: ReduceOp, values: impl IntoIterator<Item = SymbolicValue>) -> Option<Self> {
        let mut terms = Vec::new();
        for v in values {
            match &*v.0 {
                Term::Reduced { op: inner, terms: t } if *inner == op => terms.extend(t.iter().cloned()),
                _ => terms.push(v),
            }
        }
        terms.sort();
        if op == ReduceOp::Max {
            terms.dedup();
        }
        match terms.len() {
            0 => None,
            1 => terms.pop(),
            _ => Some(SymbolicValue(Arc::new(Term::Reduced { op, terms }))),
        }
    }

    /// Atoms of a reduced value (or the atom itself), in canonical order.
    pub fn operands(&self) -> Vec<SymbolicValue> {
        match &*self.0 {
            Term::Atom { .. } => vec![self.clone()],
            Term::Reduced { terms, .. } => terms.clone(),
        }
    }

    pub fn origin(&self) -> Option<(Rank, &BufferId, usize)> {
        match &*self.0 {
            Term::Atom { origin, buffer, index } => Some((*origin, buffer, *index)),
            Term::Reduced { .. } => None,
        }
    }
}

impl fmt::Display for SymbolicValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Term::Atom { origin, buffer, index } => write!(f, "{buffer}@{origin}[{index}]"),
            Term::Reduced { op, terms } => {
                write!(f, "{op}(")?;
                for (i, t) in terms.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
        }
    }
}

type Cells = Vec<Option<SymbolicValue>>;

/// Contents of every named buffer on every rank; `None` is undefined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolicState {
    world_size: usize,
    buffers: BTreeMap<BufferId, Vec<Cells>>,
}

/// First element where two states differ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub rank: Rank,
    pub buffer: BufferId,
    pub index: usize,
    pub actual: Option<SymbolicValue>,
    pub expected: Option<SymbolicValue>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<SymbolicValue>| v.as_ref().map_or("undefined".to_string(), ToString::to_string);
        write!(
            f,
            "rank {} `{}`[{}]: got {}, expected {}",
            self.rank,
            self.buffer,
            self.index,
            show(&self.actual),
            show(&self.expected)
        )
    }
}

impl SymbolicState {
    /// Input buffers hold their own atoms, everything else is undefined.
    pub fn initial(program: &CollectiveProgram) -> Self {
        let p = program.world_size();
        let buffers = program
            .buffers()
            .iter()
            .map(|(id, decl)| {
                let per_rank = (0..p)
                    .map(|r| {
                        (0..decl.len)
                            .map(|e| decl.input.then(|| SymbolicValue::atom(Rank(r), id.clone(), e)))
                            .collect()
                    })
                    .collect();
                (id.clone(), per_rank)
            })
            .collect();
        SymbolicState { world_size: p, buffers }
    }

    pub fn from_buffers(world_size: usize, buffers: BTreeMap<BufferId, Vec<Cells>>) -> Self {
        SymbolicState { world_size, buffers }
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn buffer(&self, id: &BufferId) -> Option<&[Cells]> {
        self.buffers.get(id).map(Vec::as_slice)
    }

    pub fn get(&self, rank: Rank, buffer: &BufferId, index: usize) -> Option<&SymbolicValue> {
        self.buffers.get(buffer)?.get(rank.0)?.get(index)?.as_ref()
    }

    /// First element where `self` and `other` differ, over the union of
    /// their buffers.
    pub fn first_divergence(&self, other: &SymbolicState) -> Option<Divergence> {
        let empty = Vec::new();
        let mut ids: Vec<&BufferId> = self.buffers.keys().chain(other.buffers.keys()).collect();
        ids.sort();
        ids.dedup();
        for id in ids {
            let a = self.buffers.get(id).unwrap_or(&empty);
            let b = other.buffers.get(id).unwrap_or(&empty);
            for r in 0..a.len().max(b.len()) {
                let ra = a.get(r).map_or(&[][..], Vec::as_slice);
                let rb = b.get(r).map_or(&[][..], Vec::as_slice);
                for e in 0..ra.len().max(rb.len()) {
                    let va = ra.get(e).cloned().flatten();
                    let vb = rb.get(e).cloned().flatten();
                    if va != vb {
                        return Some(Divergence { rank: Rank(r), buffer: id.clone(), index: e, actual: va, expected: vb });
                    }
                }
            }
        }
        None
    }

    /// Checks `self` against a reference that only specifies some elements:
    /// every defined reference element must be matched exactly.
    pub fn conforms(&self, reference: &SymbolicState) -> Result<(), Divergence> {
        for (id, ranks) in &reference.buffers {
            for (r, cells) in ranks.iter().enumerate() {
                for (e, expected) in cells.iter().enumerate() {
                    let Some(expected) = expected else { continue };
                    let actual = self.get(Rank(r), id, e);
                    if actual != Some(expected) {
                        return Err(Divergence {
                            rank: Rank(r),
                            buffer: id.clone(),
                            index: e,
                            actual: actual.cloned(),
                            expected: Some(expected.clone()),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("rank {rank} reads undefined `{location}`[{index}]")]
    UninitializedRead { rank: Rank, location: String, index: usize },
    #[error("rank {rank} accesses `{location}`[{index}] out of bounds")]
    OutOfBounds { rank: Rank, location: String, index: usize },
    #[error("transfer {transfer} runs before its dependency {dep}")]
    DependencyViolation { transfer: usize, dep: usize },
    #[error("execution order is not a permutation of the plan's transfers")]
    BadOrder,
}

/// Runs a program step by step. Within a step every primitive reads the
/// state left by the previous step; validation guarantees this matches any
/// interleaving.
pub fn execute_program(program: &CollectiveProgram) -> Result<SymbolicState, EngineError> {
    let mut state = SymbolicState::initial(program);
    for step in program.steps() {
        let mut writes = Vec::new();
        for prim in step {
            let read = |rank: Rank| -> Result<Vec<SymbolicValue>, EngineError> {
                let cells = &state.buffers[&prim.send.buffer][rank.0];
                prim.send
                    .range(prim.count)
                    .map(|e| {
                        cells.get(e).cloned().flatten().ok_or(EngineError::UninitializedRead {
                            rank,
                            location: prim.send.buffer.to_string(),
                            index: e,
                        })
                    })
                    .collect()
            };
            match prim.kind {
                PrimitiveKind::Multicast => {
                    let data = read(prim.root)?;
                    for &leaf in &prim.leaves {
                        writes.push((leaf, prim.recv.clone(), data.clone()));
                    }
                }
                PrimitiveKind::Reduction(op) => {
                    let inputs = prim.leaves.iter().map(|&l| read(l)).collect::<Result<Vec<_>, _>>()?;
                    let data = (0..prim.count)
                        .map(|e| SymbolicValue::reduce_all(op, inputs.iter().map(|v| v[e].clone())).expect("leaves"))
                        .collect();
                    writes.push((prim.root, prim.recv.clone(), data));
                }
            }
        }
        for (rank, at, data) in writes {
            let cells = &mut state.buffers.get_mut(&at.buffer).expect("validated")[rank.0];
            for (i, v) in data.into_iter().enumerate() {
                cells[at.offset + i] = Some(v);
            }
        }
    }
    Ok(state)
}

struct PlanMemory<'a> {
    state: SymbolicState,
    scratch: HashMap<(Rank, usize), Cells>,
    scratch_len: &'a BTreeMap<usize, usize>,
}

impl PlanMemory<'_> {
    fn cells(&mut self, rank: Rank, loc: &Location) -> Option<&mut Cells> {
        match loc {
            Location::Buffer(id) => self.state.buffers.get_mut(id)?.get_mut(rank.0),
            Location::Scratch(i) => {
                let len = *self.scratch_len.get(i)?;
                Some(self.scratch.entry((rank, *i)).or_insert_with(|| vec![None; len]))
            }
        }
    }

    fn apply(&mut self, t: &P2PTransfer) -> Result<(), EngineError> {
        let oob = |rank, loc: &Location, index| EngineError::OutOfBounds { rank, location: loc.to_string(), index };
        let src_cells = self.cells(t.src.rank, &t.src.location).ok_or_else(|| oob(t.src.rank, &t.src.location, 0))?;
        if t.src.offset + t.count > src_cells.len() {
            return Err(oob(t.src.rank, &t.src.location, t.src.offset + t.count - 1));
        }
        let data = src_cells[t.src.offset..t.src.offset + t.count]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.clone().ok_or(EngineError::UninitializedRead {
                    rank: t.src.rank,
                    location: t.src.location.to_string(),
                    index: t.src.offset + i,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dst_cells = self.cells(t.dst.rank, &t.dst.location).ok_or_else(|| oob(t.dst.rank, &t.dst.location, 0))?;
        if t.dst.offset + t.count > dst_cells.len() {
            return Err(oob(t.dst.rank, &t.dst.location, t.dst.offset + t.count - 1));
        }
        for (cell, v) in dst_cells[t.dst.offset..].iter_mut().zip(data) {
            *cell = Some(match (t.op, cell.take()) {
                (Some(op), Some(old)) => SymbolicValue::reduce(op, &old, &v),
                _ => v,
            });
        }
        Ok(())
    }
}

fn run(
    world_size: usize,
    initial: SymbolicState,
    scratch_len: &BTreeMap<usize, usize>,
    transfers: &[&P2PTransfer],
    order: Option<&[usize]>,
) -> Result<SymbolicState, EngineError> {
    debug_assert_eq!(initial.world_size, world_size);
    let natural: Vec<usize>;
    let order = match order {
        Some(o) => o,
        None => {
            natural = (0..transfers.len()).collect();
            &natural
        }
    };
    if order.len() != transfers.len() {
        return Err(EngineError::BadOrder);
    }
    let mut done = vec![false; transfers.len()];
    let mut mem = PlanMemory { state: initial, scratch: HashMap::new(), scratch_len };
    for &id in order {
        if id >= transfers.len() || done[id] {
            return Err(EngineError::BadOrder);
        }
        let t = transfers[id];
        if let Some(&dep) = t.deps.iter().find(|&&d| !done[d]) {
            return Err(EngineError::DependencyViolation { transfer: id, dep });
        }
        mem.apply(t)?;
        done[id] = true;
    }
    Ok(mem.state)
}

fn initial_for(world_size: usize, buffers: &BTreeMap<BufferId, crate::composition::BufferDecl>) -> SymbolicState {
    let program = CollectiveProgram::from_parts(world_size, buffers.clone(), Vec::new());
    SymbolicState::initial(&program)
}

/// Runs a staged plan in index order (which respects stages).
pub fn execute_plan(plan: &StagedPlan) -> Result<SymbolicState, EngineError> {
    execute_plan_in_order(plan, None)
}

/// Runs a staged plan in the given order of transfer indices, rejecting any
/// order that runs a transfer before one of its dependencies.
pub fn execute_plan_in_order(plan: &StagedPlan, order: Option<&[usize]>) -> Result<SymbolicState, EngineError> {
    let transfers: Vec<&P2PTransfer> = plan.transfers.iter().collect();
    run(plan.world_size, initial_for(plan.world_size, &plan.buffers), &plan.scratch, &transfers, order)
}

/// Runs a pipelined plan slot by slot.
pub fn execute_pipelined(plan: &PipelinedPlan) -> Result<SymbolicState, EngineError> {
    let mut order: Vec<usize> = (0..plan.transfers.len()).collect();
    order.sort_by_key(|&i| plan.transfers[i].slot);
    let transfers: Vec<&P2PTransfer> = plan.transfers.iter().map(|t| &t.transfer).collect();
    run(plan.world_size, initial_for(plan.world_size, &plan.buffers), &plan.scratch, &transfers, Some(&order))
}
