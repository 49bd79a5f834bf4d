//! `affinity-tailor` command line: `run`, `compare` and `allocate`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::allocator::{AllocationPlan, AllocatorRegistry, ContainerDemand, AUTO};
use crate::metrics::{
    aggregate_comparisons, compare_reports, ComparisonAggregate, DeltaSummary, MetricsReport,
};
use crate::scenario::{Scenario, ScenarioError};
use crate::scheduler::trace::{JsonlSink, NullSink, TraceSink};
use crate::topology::{CoreId, TopologySpec};
use crate::units::CpuUnits;

#[derive(Debug, Parser)]
#[command(name = "affinity-tailor", version, about = "Soft-affinity scheduling simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write one report per seed.
    Run(RunArgs),
    /// Run baseline and candidate policies on identical seeds and compare.
    Compare(CompareArgs),
    /// Print the preferred-core plan for a set of demands.
    Allocate(AllocateArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario TOML file, or `builtin:<name>`.
    #[arg(long)]
    pub scenario: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write JSONL execution traces.
    #[arg(long)]
    pub emit_trace: bool,
    /// Comma-separated seeds overriding the scenario's list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    /// Scheduling policy overriding the scenario's.
    #[arg(long)]
    pub policy: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ScenarioArgs,
    #[arg(long, default_value = "baseline")]
    pub baseline: String,
    #[arg(long, default_value = "cas")]
    pub candidate: String,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    /// Machine shape `SOCKETSxLLCSxCORES`, e.g. `1x4x8`.
    #[arg(long)]
    pub topology: String,
    /// CSV with header `container_id,demand`.
    #[arg(long)]
    pub demands: PathBuf,
    #[arg(long, default_value = AUTO)]
    pub allocator: String,
    /// Comma-separated cores withheld from allocation.
    #[arg(long, value_delimiter = ',')]
    pub reserved: Vec<CoreId>,
    /// Write the plan here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// A report together with the scenario that produced it.
#[derive(Debug, Serialize)]
pub struct ReportDocument<'a> {
    pub scenario: &'a Scenario,
    pub report: &'a MetricsReport,
}

#[derive(Debug, Serialize)]
pub struct ComparisonDocument<'a> {
    pub scenario: &'a Scenario,
    pub per_seed: &'a [DeltaSummary],
    pub aggregate: &'a ComparisonAggregate,
}

pub fn run_cli(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Allocate(args) => cmd_allocate(&args),
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario, CliError> {
    let mut s = match args.scenario.strip_prefix("builtin:") {
        Some(name) => Scenario::builtin(name)
            .ok_or_else(|| CliError::Config(format!("no builtin scenario `{name}`")))?,
        None => Scenario::load(Path::new(&args.scenario))?,
    };
    if let Some(seeds) = &args.seeds {
        if seeds.is_empty() {
            return Err(CliError::Config("--seeds is empty".into()));
        }
        s.seeds = seeds.clone();
    }
    Ok(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io_err(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))
}

/// Runs one seed, optionally streaming the trace to `trace_path`.
fn simulate(
    scenario: &Scenario,
    seed: u64,
    policy: Option<&str>,
    trace_path: Option<&Path>,
) -> Result<MetricsReport, CliError> {
    match trace_path {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            let mut sink = JsonlSink::new(BufWriter::new(file));
            let outcome = scenario.run(seed, policy, &mut sink)?;
            sink.finish().map_err(|e| io_err(path, e))?;
            Ok(outcome.report)
        }
        None => Ok(scenario.run(seed, policy, &mut NullSink)?.report),
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut scenario = load_scenario(&args.common)?;
    if let Some(p) = &args.policy {
        scenario.policy.variant = p.clone();
    }
    let out = &args.common.out;
    prepare_out(out)?;
    let policy = scenario.policy.variant.clone();
    for &seed in &scenario.seeds {
        let stem = format!("{policy}-seed{seed}");
        let trace = args
            .common
            .emit_trace
            .then(|| out.join(format!("trace-{stem}.jsonl")));
        let report = simulate(&scenario, seed, None, trace.as_deref())?;
        let path = out.join(format!("report-{stem}.json"));
        write_json(
            &path,
            &ReportDocument {
                scenario: &scenario,
                report: &report,
            },
        )?;
        println!(
            "seed {seed}: throughput/cpu {:.4}, p99 latency {} us, pcr {} -> {}",
            report.machine.throughput_per_cpu,
            fmt_opt(report.machine.sched_latency.p99_us),
            fmt_opt(report.machine.aggregate_pcr),
            path.display()
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))
}

/// Flat CSV of per-seed deltas.
pub fn write_delta_csv(out: impl Write, summaries: &[DeltaSummary]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "seed",
        "metric",
        "baseline",
        "candidate",
        "ratio",
        "delta_percent",
    ])?;
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for s in summaries {
        for d in &s.deltas {
            w.write_record([
                s.seed.to_string(),
                d.metric.clone(),
                cell(d.baseline),
                cell(d.candidate),
                cell(d.ratio),
                cell(d.delta_percent),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let scenario = load_scenario(&args.common)?;
    let out = &args.common.out;
    prepare_out(out)?;
    let mut summaries = Vec::new();
    for &seed in &scenario.seeds {
        let mut reports = Vec::new();
        for policy in [&args.baseline, &args.candidate] {
            let stem = format!("{policy}-seed{seed}");
            let trace = args
                .common
                .emit_trace
                .then(|| out.join(format!("trace-{stem}.jsonl")));
            let report = simulate(&scenario, seed, Some(policy), trace.as_deref())?;
            write_json(
                &out.join(format!("report-{stem}.json")),
                &ReportDocument {
                    scenario: &scenario,
                    report: &report,
                },
            )?;
            reports.push(report);
        }
        let summary =
            compare_reports(&reports[0], &reports[1]).map_err(|e| CliError::Runtime(e.to_string()))?;
        summaries.push(summary);
    }
    let aggregate = aggregate_comparisons(&summaries);
    let csv_path = out.join("compare.csv");
    let file = File::create(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    write_delta_csv(BufWriter::new(file), &summaries).map_err(|e| io_err(&csv_path, e))?;
    write_json(
        &out.join("compare.json"),
        &ComparisonDocument {
            scenario: &scenario,
            per_seed: &summaries,
            aggregate: &aggregate,
        },
    )?;
    println!(
        "{} seeds: throughput ratio (geomean) {}, p99 latency ratio (geomean) {}, cross-LLC migration reduction {}",
        aggregate.seeds,
        fmt_opt(aggregate.throughput_ratio_geomean),
        fmt_opt(aggregate.p99_latency_ratio_geomean),
        fmt_opt(aggregate.cross_llc_reduction),
    );
    Ok(())
}

/// Reads `container_id,demand` rows.
pub fn read_demands(path: &Path) -> Result<Vec<ContainerDemand>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let bad = |row: u64, m: String| CliError::Config(format!("{}, row {row}: {m}", path.display()));
    let header_ok = match reader.headers() {
        Ok(h) => h.is_empty() || h.iter().eq(["container_id", "demand"]),
        Err(e) => return Err(bad(1, e.to_string())),
    };
    if !header_ok {
        return Err(bad(1, "expected header `container_id,demand`".into()));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let row = record.position().map_or(0, |p| p.line());
        let demand: f64 = record[1]
            .parse()
            .map_err(|_| bad(row, format!("demand `{}` is not a number", &record[1])))?;
        if !demand.is_finite() || demand < 0.0 {
            return Err(bad(row, format!("demand {demand} is negative")));
        }
        out.push(ContainerDemand::new(&record[0], CpuUnits::from_f64(demand)));
    }
    Ok(out)
}

pub fn allocate_from_args(args: &AllocateArgs) -> Result<AllocationPlan, CliError> {
    let spec: TopologySpec = args
        .topology
        .parse()
        .map_err(|e: crate::topology::TopologyError| CliError::Config(e.to_string()))?;
    let topology = spec.build().map_err(|e| CliError::Config(e.to_string()))?;
    let demands = read_demands(&args.demands)?;
    let strategy = AllocatorRegistry::builtin()
        .resolve(&args.allocator, &topology)
        .map_err(|e| CliError::Config(e.to_string()))?;
    strategy
        .allocate(&demands, &topology, &args.reserved)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn cmd_allocate(args: &AllocateArgs) -> Result<(), CliError> {
    let plan = allocate_from_args(args)?;
    match &args.out {
        Some(path) => write_json(path, &plan),
        None => {
            let text =
                serde_json::to_string_pretty(&plan).map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
    }
}
