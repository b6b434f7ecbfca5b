//! Compositional collective communication for hierarchical GPU machines.
//!
//! A collective is written once as a [`CollectiveProgram`] of multicast and
//! reduction primitives separated by fences. [`lower`] factorizes it onto a
//! [`MachineDescriptor`] (hierarchical trees, multi-NIC striping, ring+tree
//! hybrids) into a dependency graph of point-to-point transfers, and
//! [`pipeline`] splits that graph into channels. [`engine`] executes both
//! levels symbolically so any plan can be checked against the program it
//! came from, and [`perf`] estimates its run time.

pub mod composition;
pub mod engine;
pub mod factorize;
pub mod io;
pub mod machine;
pub mod perf;
pub mod pipeline;
pub mod presets;

pub use composition::{
    validate, BufferDecl, BufferId, BufferRef, CollectiveProgram, CompositionError, Primitive, PrimitiveKind,
    ProgramBuilder, Rank, ReduceOp, Violation,
};
pub use engine::{execute_pipelined, execute_plan, execute_program, EngineError, SymbolicState, SymbolicValue};
pub use factorize::{lower, LowerError, P2PTransfer, StagedPlan};
pub use machine::{Binding, LinkParams, MachineDescriptor, MachineError, OptimizationConfig};
pub use perf::{simulate, ThroughputReport, Timeline};
pub use pipeline::{comm_matrix, pipeline, PipelinedPlan};
pub use presets::{build, reference_semantics, CollectiveKind, CollectiveSpec, Formulation};
