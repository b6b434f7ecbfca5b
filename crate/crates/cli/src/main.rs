//! `hiercoll` command-line front end.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use hiercoll::engine::{execute_pipelined, execute_program};
use hiercoll::factorize::{lower, validate_config};
use hiercoll::io::{read_program, write_pipelined, write_plan, write_program};
use hiercoll::machine::{systems, validate_machine, MachineDescriptor, OptimizationConfig};
use hiercoll::perf::{bound, simulate, ThroughputReport};
use hiercoll::pipeline::{comm_matrix, pipeline, PipelinedPlan};
use hiercoll::presets::{build, reference_semantics, CollectiveKind, CollectiveSpec, Formulation};
use hiercoll::{CollectiveProgram, Rank, ReduceOp};

#[derive(Parser)]
#[command(name = "hiercoll", version, about = "Compose, lower, verify and simulate hierarchical collectives")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the collective program as JSON Lines.
    Plan(ProgramArgs),
    /// Lower onto a machine and emit the staged plan as JSON Lines.
    Lower(LowerArgs),
    /// Lower, split into channels and emit the pipelined plan as JSON Lines.
    Pipeline(LowerArgs),
    /// Emit per-slot communication matrices as CSV.
    Matrix(MatrixArgs),
    /// Execute the pipelined plan symbolically and compare with the program.
    Check(LowerArgs),
    /// Simulate one configuration and emit a CSV report row.
    Simulate(SimulateArgs),
    /// Simulate a grid of configurations and emit one CSV row each.
    Sweep(SweepArgs),
    /// Emit the asymptotic throughput bound of every collective as CSV.
    Bounds(BoundsArgs),
}

#[derive(Args, Clone)]
struct ProgramArgs {
    /// Preset collective, e.g. all_reduce.
    #[arg(long, required_unless_present = "program")]
    collective: Option<CollectiveKind>,
    #[arg(long, default_value = "single")]
    formulation: Formulation,
    /// Number of ranks.
    #[arg(long)]
    p: usize,
    /// Elements per rank chunk (d).
    #[arg(long, default_value_t = 1024)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    root: usize,
    #[arg(long, default_value = "sum")]
    op: ReduceOp,
    /// Read a program from a JSON Lines file instead of a preset.
    #[arg(long, conflicts_with = "collective")]
    program: Option<PathBuf>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct LowerArgs {
    #[command(flatten)]
    program: ProgramArgs,
    /// Machine file, or one of delta, perlmutter, frontier, aurora.
    #[arg(long)]
    machine: String,
    #[arg(long, default_value_t = 1)]
    stripe: usize,
    #[arg(long, default_value_t = 1)]
    ring: usize,
    /// Pipeline depth m (number of channels).
    #[arg(long, visible_alias = "depth", default_value_t = 1)]
    pipeline: usize,
}

#[derive(Args)]
struct MatrixArgs {
    #[command(flatten)]
    lower: LowerArgs,
    /// Only this slot.
    #[arg(long)]
    stage: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    lower: LowerArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    collective: CollectiveKind,
    #[arg(long, default_value = "single")]
    formulation: Formulation,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    machine: String,
    #[arg(long, default_value_t = 0)]
    root: usize,
    /// Comma-separated chunk sizes in elements.
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    count: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    stripe: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    ring: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pipeline: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    machine: String,
    #[arg(long)]
    p: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

/// Loads a machine file, or a shipped preset by name (`perlmutter`,
/// `perlmutter.toy`, ...), resolved and validated for `p` ranks.
fn load_machine(name: &str, p: usize) -> Result<MachineDescriptor> {
    let path = Path::new(name);
    let machine = if path.exists() {
        MachineDescriptor::load(path)?
    } else {
        let stem = name.trim_end_matches(".toml").trim_end_matches(".toy");
        systems::by_name(stem).with_context(|| format!("no machine file or preset named `{name}`"))?
    };
    let machine = machine.resolve(p)?;
    if let Err(violations) = validate_machine(&machine, p) {
        let text: Vec<String> = violations.iter().map(ToString::to_string).collect();
        bail!("machine `{name}` is invalid for p = {p}: {}", text.join("; "));
    }
    Ok(machine)
}

impl ProgramArgs {
    fn spec(&self) -> Option<CollectiveSpec> {
        self.collective.map(|kind| {
            CollectiveSpec::new(kind, self.formulation, self.count).with_root(Rank(self.root)).with_op(self.op)
        })
    }

    fn load(&self) -> Result<CollectiveProgram> {
        if let Some(path) = &self.program {
            let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let program = read_program(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
            if program.world_size() != self.p {
                bail!("program has {} ranks, --p is {}", program.world_size(), self.p);
            }
            return Ok(program);
        }
        let spec = self.spec().expect("clap requires --collective or --program");
        Ok(build(&spec, self.p)?)
    }
}

impl LowerArgs {
    fn config(&self) -> OptimizationConfig {
        OptimizationConfig::new(self.stripe, self.ring, self.pipeline)
    }

    fn pipelined(&self) -> Result<(MachineDescriptor, CollectiveProgram, PipelinedPlan)> {
        let machine = load_machine(&self.machine, self.program.p)?;
        let program = self.program.load()?;
        let plan = lower(&program, &machine, &self.config())?;
        let piped = pipeline(&plan, self.pipeline)?;
        log::info!(
            "{} transfers, {} stages, {} slots",
            plan.transfers.len(),
            plan.num_stages,
            piped.num_slots
        );
        Ok((machine, program, piped))
    }
}

const REPORT_HEADER: [&str; 17] = [
    "collective",
    "formulation",
    "p",
    "count",
    "bytes",
    "machine",
    "stripe",
    "ring",
    "pipeline",
    "stages",
    "slots",
    "t_seconds",
    "throughput_bps",
    "bound_bps",
    "utilization",
    "t_ring_seconds",
    "t_tree_seconds",
];

struct Scenario<'a> {
    spec: &'a CollectiveSpec,
    p: usize,
    machine_name: &'a str,
    machine: &'a MachineDescriptor,
    config: OptimizationConfig,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn report_row(s: &Scenario) -> Result<Vec<String>> {
    let program = build(s.spec, s.p)?;
    let plan = lower(&program, s.machine, &s.config)?;
    let piped = pipeline(&plan, s.config.pipeline)?;
    let timeline = simulate(&piped, s.machine)?;
    let r = ThroughputReport::new(s.spec.kind, s.spec.count, s.machine, s.config.ring, s.config.pipeline, &timeline)?;
    Ok(vec![
        s.spec.kind.to_string(),
        s.spec.formulation.to_string(),
        s.p.to_string(),
        s.spec.count.to_string(),
        (s.spec.count * s.machine.element_size).to_string(),
        s.machine_name.to_string(),
        s.config.stripe.to_string(),
        s.config.ring.to_string(),
        s.config.pipeline.to_string(),
        plan.num_stages.to_string(),
        piped.num_slots.to_string(),
        format!("{:e}", r.t),
        format!("{:e}", r.throughput),
        opt(r.bound),
        opt(r.utilization),
        opt(r.t_ring),
        opt(r.t_tree),
    ])
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Plan(args) => {
            let program = args.load()?;
            let mut out = output(&args.out)?;
            write_program(&program, &mut out)?;
            out.flush()?;
        }
        Command::Lower(args) => {
            let machine = load_machine(&args.machine, args.program.p)?;
            let plan = lower(&args.program.load()?, &machine, &args.config())?;
            let mut out = output(&args.program.out)?;
            write_plan(&plan, &mut out)?;
            out.flush()?;
        }
        Command::Pipeline(args) => {
            let (_, _, piped) = args.pipelined()?;
            let mut out = output(&args.program.out)?;
            write_pipelined(&piped, &mut out)?;
            out.flush()?;
        }
        Command::Matrix(args) => {
            let (_, _, piped) = args.lower.pipelined()?;
            let slots: Vec<usize> = match args.stage {
                Some(s) if s >= piped.num_slots => bail!("slot {s} out of range, plan has {} slots", piped.num_slots),
                Some(s) => vec![s],
                None => (0..piped.num_slots).collect(),
            };
            let mut csv = csv::Writer::from_writer(output(&args.lower.program.out)?);
            csv.write_record(["slot", "src", "dst", "bytes"])?;
            for slot in slots {
                for (src, row) in comm_matrix(&piped, slot).iter().enumerate() {
                    for (dst, &bytes) in row.iter().enumerate().filter(|(_, &b)| b > 0) {
                        csv.write_record([slot.to_string(), src.to_string(), dst.to_string(), bytes.to_string()])?;
                    }
                }
            }
            csv.flush()?;
        }
        Command::Check(args) => {
            let (_, program, piped) = args.pipelined()?;
            let expected = execute_program(&program)?;
            let actual = execute_pipelined(&piped)?;
            let mut out = output(&args.program.out)?;
            if let Some(d) = actual.first_divergence(&expected) {
                writeln!(out, "FAIL plan differs from program: {d}")?;
                out.flush()?;
                return Ok(ExitCode::FAILURE);
            }
            if let Some(spec) = args.program.spec() {
                if let Err(d) = actual.conforms(&reference_semantics(&spec, args.program.p)) {
                    writeln!(out, "FAIL result differs from {}: {d}", spec.kind)?;
                    out.flush()?;
                    return Ok(ExitCode::FAILURE);
                }
            }
            writeln!(out, "PASS {} transfers over {} slots", piped.transfers.len(), piped.num_slots)?;
            out.flush()?;
        }
        Command::Simulate(args) => {
            let a = &args.lower;
            let Some(spec) = a.program.spec() else { bail!("simulate needs --collective") };
            let machine = load_machine(&a.machine, a.program.p)?;
            let row = report_row(&Scenario {
                spec: &spec,
                p: a.program.p,
                machine_name: &a.machine,
                machine: &machine,
                config: a.config(),
            })?;
            let mut csv = csv::Writer::from_writer(output(&a.program.out)?);
            csv.write_record(REPORT_HEADER)?;
            csv.write_record(&row)?;
            csv.flush()?;
        }
        Command::Sweep(args) => {
            let machine = load_machine(&args.machine, args.p)?;
            let mut grid = Vec::new();
            for &count in &args.count {
                for &stripe in &args.stripe {
                    for &ring in &args.ring {
                        for &m in &args.pipeline {
                            grid.push((count, stripe, ring, m));
                        }
                    }
                }
            }
            grid.sort_unstable();
            grid.dedup();
            let rows: Vec<Option<Vec<String>>> = grid
                .par_iter()
                .map(|&(count, stripe, ring, m)| {
                    let config = OptimizationConfig::new(stripe, ring, m);
                    if let Err(e) = validate_config(&machine, &config) {
                        log::warn!("skipping stripe={stripe} ring={ring} pipeline={m}: {e}");
                        return Ok(None);
                    }
                    let spec = CollectiveSpec::new(args.collective, args.formulation, count).with_root(Rank(args.root));
                    let scenario =
                        Scenario { spec: &spec, p: args.p, machine_name: &args.machine, machine: &machine, config };
                    report_row(&scenario).map(Some)
                })
                .collect::<Result<_>>()?;
            let mut csv = csv::Writer::from_writer(output(&args.out)?);
            csv.write_record(REPORT_HEADER)?;
            for row in rows.into_iter().flatten() {
                csv.write_record(&row)?;
            }
            csv.flush()?;
        }
        Command::Bounds(args) => {
            let machine = load_machine(&args.machine, args.p)?;
            let mut csv = csv::Writer::from_writer(output(&args.out)?);
            csv.write_record(["collective", "p", "g", "k", "f_bps", "bound_bps"])?;
            for kind in CollectiveKind::ALL {
                let (g, k, f) = (machine.gpus_per_node, machine.nics_per_node, machine.nic_bandwidth);
                let b = bound(kind, args.p, g, k, f)?;
                csv.write_record([
                    kind.to_string(),
                    args.p.to_string(),
                    g.to_string(),
                    k.to_string(),
                    format!("{f:e}"),
                    format!("{b:e}"),
                ])?;
            }
            csv.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HIERCOLL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
