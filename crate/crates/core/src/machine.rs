//! Hierarchical network descriptions: factor vector, per-level links, node
//! geometry and GPU to NIC bindings.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::composition::Rank;

/// Static GPU to NIC association inside a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Packed,
    RoundRobin,
    Bijective,
}

/// Latency and per-link bandwidth of one hierarchy level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    /// Seconds.
    pub alpha: f64,
    /// Bytes per second of one GPU's link at this level. Only used for
    /// transfers that stay inside a node; inter-node traffic is limited by
    /// the NICs.
    pub bandwidth: f64,
    /// Reporting label such as "MPI", "NCCL" or "IPC".
    #[serde(default)]
    pub transport: String,
}

impl LinkParams {
    pub fn new(alpha: f64, bandwidth: f64, transport: impl Into<String>) -> Self {
        LinkParams { alpha, bandwidth, transport: transport.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineDescriptor {
    /// Top-down factors; their product is the world size.
    pub hierarchy: Vec<usize>,
    /// One entry per hierarchy level, top-down.
    pub levels: Vec<LinkParams>,
    pub gpus_per_node: usize,
    pub nics_per_node: usize,
    /// Bytes per second per NIC and direction.
    pub nic_bandwidth: f64,
    pub binding: Binding,
    #[serde(default = "default_element_size")]
    pub element_size: usize,
}

fn default_element_size() -> usize {
    4
}

/// A contiguous block of ranks at some depth of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub id: usize,
    pub ranks: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineError {
    #[error("depth {depth} out of range for {levels} levels")]
    DepthOutOfRange { depth: usize, levels: usize },
    #[error("rank {rank} out of range for world size {p}")]
    RankOutOfRange { rank: Rank, p: usize },
    #[error("packed binding needs nics_per_node ({k}) to divide gpus_per_node ({g}); use round_robin")]
    PackedIndivisible { g: usize, k: usize },
    #[error("cannot resolve hierarchy {hierarchy:?} for {p} ranks")]
    Unresolvable { hierarchy: Vec<usize>, p: usize },
    #[error("invalid machine: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<MachineViolation>),
    #[error("reading machine file: {0}")]
    Io(String),
    #[error("parsing machine file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineViolation {
    #[error("hierarchy product {product} does not match {p} ranks")]
    ProductMismatch { product: usize, p: usize },
    #[error("hierarchy is empty")]
    EmptyHierarchy,
    #[error("hierarchy factor must be positive")]
    ZeroFactor,
    #[error("{levels} link entries for {factors} hierarchy levels")]
    LevelCountMismatch { levels: usize, factors: usize },
    #[error("level {level}: alpha must be >= 0 and bandwidth > 0")]
    BadLink { level: usize },
    #[error("gpus_per_node and nics_per_node must be positive")]
    EmptyNode,
    #[error("nics_per_node {k} exceeds gpus_per_node {g}")]
    TooManyNics { g: usize, k: usize },
    #[error("bijective binding needs gpus_per_node == nics_per_node ({g} != {k})")]
    BijectiveMismatch { g: usize, k: usize },
    #[error("packed binding needs nics_per_node ({k}) to divide gpus_per_node ({g})")]
    PackedIndivisible { g: usize, k: usize },
    #[error("gpus_per_node {g} does not divide {p} ranks")]
    NodeIndivisible { g: usize, p: usize },
    #[error("no suffix of the hierarchy multiplies to gpus_per_node {g}")]
    NodeBoundary { g: usize },
    #[error("nic_bandwidth must be positive")]
    BadNicBandwidth,
    #[error("element_size must be positive")]
    BadElementSize,
}

impl MachineDescriptor {
    pub fn world_size(&self) -> usize {
        self.hierarchy.iter().product()
    }

    pub fn num_levels(&self) -> usize {
        self.hierarchy.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.world_size() / self.gpus_per_node
    }

    /// Number of ranks in one group at `depth` (depth 0 is everybody).
    pub fn group_size(&self, depth: usize) -> usize {
        let prefix: usize = self.hierarchy[..depth.min(self.hierarchy.len())].iter().product();
        self.world_size() / prefix
    }

    pub fn group_of(&self, rank: Rank, depth: usize) -> Result<Group, MachineError> {
        if depth > self.num_levels() {
            return Err(MachineError::DepthOutOfRange { depth, levels: self.num_levels() });
        }
        let p = self.world_size();
        if rank.0 >= p {
            return Err(MachineError::RankOutOfRange { rank, p });
        }
        let size = self.group_size(depth);
        let id = rank.0 / size;
        Ok(Group { id, ranks: id * size..(id + 1) * size })
    }

    pub fn node_of(&self, rank: Rank) -> usize {
        rank.0 / self.gpus_per_node
    }

    pub fn node_ranks(&self, rank: Rank) -> Range<usize> {
        let start = self.node_of(rank) * self.gpus_per_node;
        start..start + self.gpus_per_node
    }

    /// Hierarchy level a transfer between `a` and `b` crosses: the
    /// shallowest depth at which the two ranks sit in different groups, or 0
    /// when they are the same rank.
    pub fn crossing_level(&self, a: Rank, b: Rank) -> usize {
        (1..=self.num_levels())
            .find(|&depth| a.0 / self.group_size(depth) != b.0 / self.group_size(depth))
            .unwrap_or(0)
    }

    pub fn link(&self, level: usize) -> Option<&LinkParams> {
        level.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn nic_of(&self, rank: Rank) -> Result<usize, MachineError> {
        let g = self.gpus_per_node;
        let k = self.nics_per_node;
        let local = rank.0 % g;
        match self.binding {
            Binding::Packed => {
                if k == 0 || !g.is_multiple_of(k) {
                    return Err(MachineError::PackedIndivisible { g, k });
                }
                Ok(local / (g / k))
            }
            Binding::RoundRobin => Ok(local % k),
            Binding::Bijective => Ok(local),
        }
    }

    /// Same node geometry and NICs under a different factorization.
    pub fn with_hierarchy(&self, hierarchy: Vec<usize>, levels: Vec<LinkParams>) -> Self {
        MachineDescriptor { hierarchy, levels, ..self.clone() }
    }

    /// Replaces a single 0 factor with whatever makes the product `p`.
    pub fn resolve(mut self, p: usize) -> Result<Self, MachineError> {
        let zeros = self.hierarchy.iter().filter(|&&h| h == 0).count();
        if zeros == 0 {
            return Ok(self);
        }
        let known: usize = self.hierarchy.iter().filter(|&&h| h != 0).product();
        if zeros > 1 || known == 0 || !p.is_multiple_of(known) || p / known == 0 {
            return Err(MachineError::Unresolvable { hierarchy: self.hierarchy, p });
        }
        for h in &mut self.hierarchy {
            if *h == 0 {
                *h = p / known;
            }
        }
        Ok(self)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, MachineError> {
        toml::from_str(text).map_err(|e| MachineError::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("machine descriptors always serialize")
    }

    pub fn load(path: &Path) -> Result<Self, MachineError> {
        let text = std::fs::read_to_string(path).map_err(|e| MachineError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Loads, resolves for `p` ranks and validates.
    pub fn load_for(path: &Path, p: usize) -> Result<Self, MachineError> {
        let m = Self::load(path)?.resolve(p)?;
        validate_machine(&m, p).map_err(MachineError::Invalid)?;
        Ok(m)
    }
}

/// Checks every descriptor invariant against world size `p`.
pub fn validate_machine(m: &MachineDescriptor, p: usize) -> Result<(), Vec<MachineViolation>> {
    let mut v = Vec::new();
    if m.hierarchy.is_empty() {
        v.push(MachineViolation::EmptyHierarchy);
    }
    if m.hierarchy.contains(&0) {
        v.push(MachineViolation::ZeroFactor);
    }
    let product: usize = m.hierarchy.iter().product();
    if product != p {
        v.push(MachineViolation::ProductMismatch { product, p });
    }
    if m.levels.len() != m.hierarchy.len() {
        v.push(MachineViolation::LevelCountMismatch { levels: m.levels.len(), factors: m.hierarchy.len() });
    }
    for (i, link) in m.levels.iter().enumerate() {
        if !(link.alpha >= 0.0 && link.bandwidth > 0.0) {
            v.push(MachineViolation::BadLink { level: i + 1 });
        }
    }
    let (g, k) = (m.gpus_per_node, m.nics_per_node);
    if g == 0 || k == 0 {
        v.push(MachineViolation::EmptyNode);
    } else {
        if k > g {
            v.push(MachineViolation::TooManyNics { g, k });
        }
        match m.binding {
            Binding::Bijective if g != k => v.push(MachineViolation::BijectiveMismatch { g, k }),
            Binding::Packed if g % k != 0 => v.push(MachineViolation::PackedIndivisible { g, k }),
            _ => {}
        }
        if !p.is_multiple_of(g) {
            v.push(MachineViolation::NodeIndivisible { g, p });
        } else if m.hierarchy.len() > 1 && !m.hierarchy.contains(&0) && product == p {
            // A direct single-level hierarchy may ignore node boundaries.
            let aligned = (0..=m.hierarchy.len()).any(|depth| m.group_size(depth) == g);
            if !aligned {
                v.push(MachineViolation::NodeBoundary { g });
            }
        }
    }
    if !(m.nic_bandwidth > 0.0) {
        v.push(MachineViolation::BadNicBandwidth);
    }
    if m.element_size == 0 {
        v.push(MachineViolation::BadElementSize);
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Striping, ring and pipelining parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OptimizationConfig {
    pub stripe: usize,
    pub ring: usize,
    pub pipeline: usize,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        OptimizationConfig { stripe: 1, ring: 1, pipeline: 1 }
    }
}

impl OptimizationConfig {
    pub fn new(stripe: usize, ring: usize, pipeline: usize) -> Self {
        OptimizationConfig { stripe, ring, pipeline }
    }
}

impl fmt::Display for OptimizationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stripe={} ring={} pipeline={}", self.stripe, self.ring, self.pipeline)
    }
}

/// Built-in toy-scale descriptions of the four reference systems, using
/// their rated per-node figures.
pub mod systems {
    use super::*;

    const GB: f64 = 1e9;

    fn inter(label: &str) -> LinkParams {
        LinkParams::new(5e-6, 25.0 * GB, label)
    }

    fn ipc(bandwidth: f64) -> LinkParams {
        LinkParams::new(1e-6, bandwidth, "IPC")
    }

    /// 4 nodes of 4 A100s and a single NIC.
    pub fn delta() -> MachineDescriptor {
        MachineDescriptor {
            hierarchy: vec![2, 2, 4],
            levels: vec![inter("NCCL"), inter("NCCL"), ipc(300.0 * GB)],
            gpus_per_node: 4,
            nics_per_node: 1,
            nic_bandwidth: 25.0 * GB,
            binding: Binding::Packed,
            element_size: 4,
        }
    }

    /// 4 nodes of 4 A100s and 4 NICs.
    pub fn perlmutter() -> MachineDescriptor {
        MachineDescriptor {
            hierarchy: vec![2, 2, 4],
            levels: vec![inter("NCCL"), inter("NCCL"), ipc(300.0 * GB)],
            gpus_per_node: 4,
            nics_per_node: 4,
            nic_bandwidth: 25.0 * GB,
            binding: Binding::Bijective,
            element_size: 4,
        }
    }

    /// 4 nodes of 4 dual-die MI250x and 4 NICs.
    pub fn frontier() -> MachineDescriptor {
        MachineDescriptor {
            hierarchy: vec![2, 2, 4, 2],
            levels: vec![inter("MPI"), inter("MPI"), ipc(100.0 * GB), ipc(200.0 * GB)],
            gpus_per_node: 8,
            nics_per_node: 4,
            nic_bandwidth: 25.0 * GB,
            binding: Binding::Packed,
            element_size: 4,
        }
    }

    /// Nodes of 6 dual-tile PVCs and 8 NICs; the top factor is resolved from
    /// the world size.
    pub fn aurora() -> MachineDescriptor {
        MachineDescriptor {
            hierarchy: vec![0, 6, 2],
            levels: vec![inter("MPI"), ipc(200.0 * GB), ipc(400.0 * GB)],
            gpus_per_node: 12,
            nics_per_node: 8,
            nic_bandwidth: 25.0 * GB,
            binding: Binding::RoundRobin,
            element_size: 4,
        }
    }

    pub fn by_name(name: &str) -> Option<MachineDescriptor> {
        match name {
            "delta" => Some(delta()),
            "perlmutter" => Some(perlmutter()),
            "frontier" => Some(frontier()),
            "aurora" => Some(aurora()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine(hierarchy: Vec<usize>, g: usize, k: usize, binding: Binding) -> MachineDescriptor {
        let levels = hierarchy.iter().map(|_| LinkParams::new(1e-6, 1e10, "X")).collect();
        MachineDescriptor {
            hierarchy,
            levels,
            gpus_per_node: g,
            nics_per_node: k,
            nic_bandwidth: 25e9,
            binding,
            element_size: 4,
        }
    }

    #[test]
    fn group_of_examples() {
        let m = machine(vec![2, 6, 2], 12, 12, Binding::Bijective);
        assert_eq!(m.group_of(Rank(13), 1).unwrap(), Group { id: 1, ranks: 12..24 });
        assert_eq!(m.group_of(Rank(13), 0).unwrap(), Group { id: 0, ranks: 0..24 });
        assert!(m.group_of(Rank(13), 4).is_err());

        let m = machine(vec![2, 2, 3], 3, 3, Binding::Bijective);
        assert_eq!(m.group_of(Rank(7), 3).unwrap(), Group { id: 7, ranks: 7..8 });
        assert_eq!(m.group_of(Rank(7), 2).unwrap(), Group { id: 2, ranks: 6..9 });
    }

    #[test]
    fn groups_refine() {
        let m = machine(vec![2, 2, 6, 2], 12, 8, Binding::RoundRobin);
        for depth in 0..m.num_levels() {
            for r in 0..m.world_size() {
                let outer = m.group_of(Rank(r), depth).unwrap();
                let inner = m.group_of(Rank(r), depth + 1).unwrap();
                assert!(outer.ranks.start <= inner.ranks.start && inner.ranks.end <= outer.ranks.end);
                assert!(outer.ranks.contains(&r));
            }
        }
    }

    #[test]
    fn nic_bindings() {
        let m = machine(vec![2, 4], 4, 2, Binding::Packed);
        let nics: Vec<_> = (0..4).map(|r| m.nic_of(Rank(r)).unwrap()).collect();
        assert_eq!(nics, vec![0, 0, 1, 1]);

        let m = machine(vec![2, 12], 12, 8, Binding::RoundRobin);
        assert_eq!(m.nic_of(Rank(8)).unwrap(), 0);
        let mut load = [0usize; 8];
        for r in 0..12 {
            load[m.nic_of(Rank(r)).unwrap()] += 1;
        }
        assert_eq!(load, [2, 2, 2, 2, 1, 1, 1, 1]);

        let m = machine(vec![2, 4], 4, 4, Binding::Bijective);
        assert_eq!(m.nic_of(Rank(3)).unwrap(), 3);

        let m = machine(vec![2, 12], 12, 8, Binding::Packed);
        assert!(m.nic_of(Rank(0)).is_err());
    }

    #[test]
    fn validation() {
        let m = machine(vec![2, 2, 4], 4, 4, Binding::Bijective);
        assert!(validate_machine(&m, 16).is_ok());

        let m = machine(vec![2, 3], 3, 3, Binding::Bijective);
        assert!(validate_machine(&m, 8).unwrap_err().contains(&MachineViolation::ProductMismatch { product: 6, p: 8 }));

        let m = machine(vec![2, 12], 12, 8, Binding::Bijective);
        assert!(validate_machine(&m, 24).unwrap_err().contains(&MachineViolation::BijectiveMismatch { g: 12, k: 8 }));

        let m = machine(vec![6], 3, 1, Binding::Packed);
        assert!(validate_machine(&m, 6).is_ok(), "direct hierarchy ignores node boundaries");

        let m = machine(vec![3, 2], 4, 4, Binding::Bijective);
        assert!(validate_machine(&m, 6).is_err());
    }

    #[test]
    fn crossing_levels() {
        let m = machine(vec![2, 2, 3], 3, 3, Binding::Bijective);
        assert_eq!(m.crossing_level(Rank(0), Rank(6)), 1);
        assert_eq!(m.crossing_level(Rank(0), Rank(3)), 2);
        assert_eq!(m.crossing_level(Rank(0), Rank(2)), 3);
        assert_eq!(m.crossing_level(Rank(4), Rank(4)), 0);
    }

    #[test]
    fn resolve_and_presets() {
        let a = systems::aurora().resolve(24).unwrap();
        assert_eq!(a.hierarchy, vec![2, 6, 2]);
        assert!(validate_machine(&a, 24).is_ok());
        for name in ["delta", "perlmutter", "frontier"] {
            let m = systems::by_name(name).unwrap();
            let p = m.world_size();
            assert!(validate_machine(&m, p).is_ok(), "{name}");
        }
        let text = a.to_toml_string();
        assert_eq!(MachineDescriptor::from_toml_str(&text).unwrap(), a);
    }

    #[test]
    fn shipped_machine_files_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../machines");
        for name in ["delta", "perlmutter", "frontier", "aurora"] {
            let loaded = MachineDescriptor::load(&dir.join(format!("{name}.toml"))).unwrap();
            assert_eq!(loaded, systems::by_name(name).unwrap(), "{name}");
        }
    }
}
