//! JSON Lines encoding of programs and plans: one header object, then one
//! object per primitive or transfer. Output is deterministic.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::{validate, BufferDecl, BufferId, CollectiveProgram, Primitive, Violation};
use crate::factorize::{P2PTransfer, StagedPlan};
use crate::pipeline::{PipelinedPlan, PipelinedTransfer};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("missing header line")]
    MissingHeader,
    #[error("expected a `{expected}` file, found `{found}`")]
    WrongKind { expected: &'static str, found: String },
    #[error("program is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
}

#[derive(Serialize, Deserialize)]
struct ProgramHeader {
    kind: String,
    world_size: usize,
    steps: usize,
    buffers: BTreeMap<BufferId, BufferDecl>,
}

#[derive(Serialize, Deserialize)]
struct ProgramLine {
    step: usize,
    #[serde(flatten)]
    primitive: Primitive,
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    kind: String,
    world_size: usize,
    buffers: BTreeMap<BufferId, BufferDecl>,
    scratch: BTreeMap<usize, usize>,
    num_stages: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stripe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ring: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_slots: Option<usize>,
    element_size: usize,
}

fn line<T: Serialize>(out: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")
}

fn read_lines<H: DeserializeOwned, L: DeserializeOwned>(input: impl BufRead) -> Result<(H, Vec<L>), IoError> {
    let mut header = None;
    let mut body = Vec::new();
    for (i, text) in input.lines().enumerate() {
        let text = text?;
        if text.trim().is_empty() {
            continue;
        }
        let err = |source| IoError::Json { line: i + 1, source };
        if header.is_none() {
            header = Some(serde_json::from_str(&text).map_err(err)?);
        } else {
            body.push(serde_json::from_str(&text).map_err(err)?);
        }
    }
    Ok((header.ok_or(IoError::MissingHeader)?, body))
}

fn check_kind(found: &str, expected: &'static str) -> Result<(), IoError> {
    if found == expected {
        Ok(())
    } else {
        Err(IoError::WrongKind { expected, found: found.to_string() })
    }
}

pub fn write_program(program: &CollectiveProgram, mut out: impl Write) -> std::io::Result<()> {
    line(
        &mut out,
        &ProgramHeader {
            kind: "program".into(),
            world_size: program.world_size(),
            steps: program.steps().len(),
            buffers: program.buffers().clone(),
        },
    )?;
    for (step, prim) in program.primitives() {
        line(&mut out, &ProgramLine { step, primitive: prim.clone() })?;
    }
    Ok(())
}

/// Reads and validates a program.
pub fn read_program(input: impl BufRead) -> Result<CollectiveProgram, IoError> {
    let (header, lines): (ProgramHeader, Vec<ProgramLine>) = read_lines(input)?;
    check_kind(&header.kind, "program")?;
    let mut steps = vec![Vec::new(); header.steps];
    for l in lines {
        if l.step >= steps.len() {
            steps.resize(l.step + 1, Vec::new());
        }
        steps[l.step].push(l.primitive);
    }
    let program = CollectiveProgram::from_parts(header.world_size, header.buffers, steps);
    validate(&program).map_err(IoError::Invalid)?;
    Ok(program)
}

pub fn write_plan(plan: &StagedPlan, mut out: impl Write) -> std::io::Result<()> {
    line(
        &mut out,
        &PlanHeader {
            kind: "staged_plan".into(),
            world_size: plan.world_size,
            buffers: plan.buffers.clone(),
            scratch: plan.scratch.clone(),
            num_stages: plan.num_stages,
            stripe: Some(plan.stripe),
            ring: Some(plan.ring),
            channels: None,
            num_slots: None,
            element_size: plan.element_size,
        },
    )?;
    for t in &plan.transfers {
        line(&mut out, t)?;
    }
    Ok(())
}

pub fn read_plan(input: impl BufRead) -> Result<StagedPlan, IoError> {
    let (h, transfers): (PlanHeader, Vec<P2PTransfer>) = read_lines(input)?;
    check_kind(&h.kind, "staged_plan")?;
    Ok(StagedPlan {
        world_size: h.world_size,
        buffers: h.buffers,
        scratch: h.scratch,
        num_stages: h.num_stages,
        stripe: h.stripe.unwrap_or(1),
        ring: h.ring.unwrap_or(1),
        element_size: h.element_size,
        transfers,
    })
}

pub fn write_pipelined(plan: &PipelinedPlan, mut out: impl Write) -> std::io::Result<()> {
    line(
        &mut out,
        &PlanHeader {
            kind: "pipelined_plan".into(),
            world_size: plan.world_size,
            buffers: plan.buffers.clone(),
            scratch: plan.scratch.clone(),
            num_stages: plan.num_stages,
            stripe: None,
            ring: None,
            channels: Some(plan.channels),
            num_slots: Some(plan.num_slots),
            element_size: plan.element_size,
        },
    )?;
    for t in &plan.transfers {
        line(&mut out, t)?;
    }
    Ok(())
}

pub fn read_pipelined(input: impl BufRead) -> Result<PipelinedPlan, IoError> {
    let (h, transfers): (PlanHeader, Vec<PipelinedTransfer>) = read_lines(input)?;
    check_kind(&h.kind, "pipelined_plan")?;
    let num_slots = h.num_slots.unwrap_or_else(|| transfers.iter().map(|t| t.slot + 1).max().unwrap_or(0));
    Ok(PipelinedPlan {
        world_size: h.world_size,
        buffers: h.buffers,
        scratch: h.scratch,
        num_stages: h.num_stages,
        channels: h.channels.unwrap_or(1),
        num_slots,
        element_size: h.element_size,
        transfers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorize::lower;
    use crate::machine::{systems, OptimizationConfig};
    use crate::pipeline::pipeline;
    use crate::presets::{build, CollectiveKind, CollectiveSpec, Formulation};

    #[test]
    fn roundtrips() {
        let prog = build(&CollectiveSpec::new(CollectiveKind::AllReduce, Formulation::Multi, 3), 16).unwrap();
        let mut buf = Vec::new();
        write_program(&prog, &mut buf).unwrap();
        assert_eq!(read_program(buf.as_slice()).unwrap(), prog);

        let plan = lower(&prog, &systems::perlmutter(), &OptimizationConfig::new(4, 2, 1)).unwrap();
        let mut buf = Vec::new();
        write_plan(&plan, &mut buf).unwrap();
        assert_eq!(read_plan(buf.as_slice()).unwrap(), plan);

        let piped = pipeline(&plan, 3).unwrap();
        let mut buf = Vec::new();
        write_pipelined(&piped, &mut buf).unwrap();
        assert_eq!(read_pipelined(buf.as_slice()).unwrap(), piped);
        assert!(matches!(read_plan(buf.as_slice()), Err(IoError::WrongKind { .. })));
    }
}
