//! Pipeline front end. Every stage of the toolkit is a subcommand that reads
//! plain files and writes plain files: generate a scenario, classify
//! divergence, plan instrumentation, profile traces, train the predictor,
//! replay a trace through the loader, and fold the results into benchmark
//! metrics. `pipeline` chains all of it from one config.
//!
//! Identical inputs produce byte-identical outputs, artifacts are written
//! whole (no partial updates), and no subcommand ever modifies its inputs.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use shroud_core::corpus::{self, Scale, Scenario, ScenarioSpec};
use shroud_core::divergence::classify_divergence;
use shroud_core::ir::{FnId, Program};
use shroud_core::metrics::{write_report_csv, BenchmarkReport, CveList};
use shroud_core::plan::{plan_program, FeatureLayout, ProgramPlan};
use shroud_core::profile::{
    build_profile, read_csv, read_trace, write_csv, write_trace, ChainFile, ChainMode, TraceEvent,
};
use shroud_core::sim::{
    simulate, verify_event_log, CleanReplayOracle, Policy, SimMode, Simulation, SimulationReport,
};
use shroud_core::tree::{self, train_tree, DecisionTreeModel};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag or subcommand, missing argument)
  3  missing or unreadable input file
  4  malformed input (JSON, CSV, or tree text does not parse)
  5  inconsistent input (ids or structure violate a stage's rules)
  6  output could not be written";

#[derive(Parser)]
#[command(
    name = "shroud",
    version,
    about = "Demand-driven library loading: analysis, prediction, and replay",
    after_help = EXIT_HELP
)]
struct Cli {
    /// Raise log verbosity (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Expand a scenario spec into a program, oracle, and traces.
    Gen(GenArgs),
    /// Classify every library function as divergent or not.
    Divergence(DivergenceArgs),
    /// Compute per-site instrumentation plans for a program.
    Plan(PlanArgs),
    /// Turn traces into a training table and a chain table.
    Profile(ProfileArgs),
    /// Train the call-chain predictor from a training table.
    Train(TrainArgs),
    /// Replay a trace through the blanking loader.
    Simulate(SimulateArgs),
    /// Fold a simulation report into benchmark metrics.
    Report(ReportArgs),
    /// Run every stage end to end from one config file.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scenario spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for program.json, oracle.json, and the traces.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DivergenceArgs {
    /// Program (JSON).
    #[arg(long)]
    program: PathBuf,
    /// Write the full classification as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    /// Program (JSON).
    #[arg(long)]
    program: PathBuf,
    /// Output plan (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Instrumentation plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Trace file (JSONL); repeat to concatenate several runs.
    #[arg(long = "trace", required = true)]
    traces: Vec<PathBuf>,
    /// Chain flavor recorded per window.
    #[arg(long, value_enum, default_value_t = ChainFlavor::Set)]
    mode: ChainFlavor,
    /// Output training table (CSV).
    #[arg(long)]
    csv: PathBuf,
    /// Output chain table (JSON).
    #[arg(long)]
    chains: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training table (CSV, header `site,f0,...,label`).
    #[arg(long)]
    csv: PathBuf,
    /// Maximum tree depth in edges.
    #[arg(long, default_value_t = 10)]
    depth: usize,
    /// Output model (text).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Program (JSON).
    #[arg(long)]
    program: PathBuf,
    /// Instrumentation plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Trained model (text).
    #[arg(long)]
    model: PathBuf,
    /// Chain table (JSON) mapping predicted labels to chains.
    #[arg(long)]
    chains: PathBuf,
    /// Trace to replay (JSONL).
    #[arg(long)]
    trace: PathBuf,
    /// Loading discipline.
    #[arg(long, value_enum)]
    mode: LoaderMode,
    /// Defer purging until the next probe; skip it on identical predictions.
    #[arg(long, value_enum)]
    lazy_blanking: OnOff,
    /// Clean-replay oracle for audits (JSON).
    #[arg(long)]
    oracle: PathBuf,
    /// Output simulation report (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Also stream the event log here (JSONL).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Check the event log against the runtime invariants after the run.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Program (JSON), for totals and gadget counts.
    #[arg(long)]
    program: PathBuf,
    /// Simulation report produced by `simulate` (JSON).
    #[arg(long)]
    sim_report: PathBuf,
    /// Benchmark name for the report row.
    #[arg(long)]
    benchmark: String,
    /// Vulnerable-function list (JSON array of names); enables CVE columns.
    #[arg(long)]
    cve: Option<PathBuf>,
    /// Output benchmark report (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the plot row (CSV).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config (JSON); see docs/formats.md for the schema.
    #[arg(long)]
    config: PathBuf,
    /// Run up to N scenarios in parallel (default: sequential).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ChainFlavor {
    /// Distinct functions in first-call order.
    Set,
    /// Full call order with repeats.
    Sequence,
}

impl From<ChainFlavor> for ChainMode {
    fn from(m: ChainFlavor) -> ChainMode {
        match m {
            ChainFlavor::Set => ChainMode::Set,
            ChainFlavor::Sequence => ChainMode::Sequence,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum LoaderMode {
    /// Load the predicted chain as one set.
    Set,
    /// Walk the predicted sequence one function at a time.
    Fullchain,
}

impl From<LoaderMode> for SimMode {
    fn from(m: LoaderMode) -> SimMode {
        match m {
            LoaderMode::Set => SimMode::Set,
            LoaderMode::Fullchain => SimMode::FullChain,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn is_on(self) -> bool {
        self == OnOff::On
    }
}

/// Failure taxonomy behind the documented exit codes. Every error names the
/// file it arose from so batch logs stay attributable.
enum Fail {
    Missing(PathBuf, io::Error),
    Schema(PathBuf, String),
    Semantic(String),
    Output(PathBuf, io::Error),
}

impl Fail {
    fn code(&self) -> u8 {
        match self {
            Fail::Missing(..) => 3,
            Fail::Schema(..) => 4,
            Fail::Semantic(..) => 5,
            Fail::Output(..) => 6,
        }
    }
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fail::Missing(p, e) => write!(f, "cannot read {}: {e}", p.display()),
            Fail::Schema(p, e) => write!(f, "{} does not parse: {e}", p.display()),
            Fail::Semantic(e) => write!(f, "{e}"),
            Fail::Output(p, e) => write!(f, "cannot write {}: {e}", p.display()),
        }
    }
}

fn read_text(p: &Path) -> Result<String, Fail> {
    fs::read_to_string(p).map_err(|e| Fail::Missing(p.to_path_buf(), e))
}

fn write_bytes(p: &Path, bytes: &[u8]) -> Result<(), Fail> {
    if let Some(dir) = p.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Fail::Output(p.to_path_buf(), e))?;
        }
    }
    fs::write(p, bytes).map_err(|e| Fail::Output(p.to_path_buf(), e))
}

fn load_program(p: &Path) -> Result<Program, Fail> {
    let text = read_text(p)?;
    // Structural id checks live in the loader, so distinguish a JSON syntax
    // failure from a well-formed document with inconsistent contents.
    match serde_json::from_str::<serde_json::Value>(&text) {
        Err(e) => Err(Fail::Schema(p.to_path_buf(), e.to_string())),
        Ok(_) => Program::from_json_str(&text).map_err(|e| Fail::Semantic(e.to_string())),
    }
}

fn load_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T, Fail> {
    let text = read_text(p)?;
    serde_json::from_str(&text).map_err(|e| Fail::Schema(p.to_path_buf(), e.to_string()))
}

fn load_traces(paths: &[PathBuf]) -> Result<Vec<TraceEvent>, Fail> {
    let mut events = Vec::new();
    for p in paths {
        let text = read_text(p)?;
        let mut run = read_trace(io::BufReader::new(text.as_bytes()))
            .map_err(|e| Fail::Schema(p.to_path_buf(), e.to_string()))?;
        events.append(&mut run);
    }
    Ok(events)
}

fn load_model(p: &Path) -> Result<DecisionTreeModel, Fail> {
    let text = read_text(p)?;
    tree::from_text(&text).map_err(|e| match e {
        tree::TreeTextError::Structure(s) => Fail::Semantic(s),
        other => Fail::Schema(p.to_path_buf(), other.to_string()),
    })
}

/// Library functions the loader never blanks: uninstrumentable or pinned.
fn permanent_set(p: &Program) -> BTreeSet<FnId> {
    p.functions()
        .values()
        .filter(|f| f.is_library && (!f.instrumentable || !f.blankable))
        .map(|f| f.id)
        .collect()
}

fn events_jsonl(sim: &Simulation) -> String {
    let mut out = String::new();
    for ev in &sim.log {
        out.push_str(&serde_json::to_string(ev).expect("event serialization"));
        out.push('\n');
    }
    out
}

fn trace_to_bytes(events: &[TraceEvent]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(&mut buf, events).expect("in-memory trace write");
    buf
}

fn cmd_gen(a: &GenArgs) -> Result<(), Fail> {
    let text = read_text(&a.spec)?;
    let spec = ScenarioSpec::from_json_str(&text)
        .map_err(|e| Fail::Schema(a.spec.clone(), e.to_string()))?;
    let sc = corpus::generate(&spec).map_err(|e| Fail::Semantic(e.to_string()))?;
    write_scenario_inputs(&a.out, &sc)?;
    log::info!("generated scenario {} into {}", spec.name, a.out.display());
    Ok(())
}

fn write_scenario_inputs(dir: &Path, sc: &Scenario) -> Result<(), Fail> {
    write_bytes(&dir.join("program.json"), sc.program.to_json_string().as_bytes())?;
    write_bytes(&dir.join("oracle.json"), sc.oracle.to_json_string().as_bytes())?;
    for s in Scale::ALL {
        let name = format!("trace.{}.jsonl", s.file_stem());
        write_bytes(&dir.join(name), &trace_to_bytes(sc.trace(s)))?;
    }
    Ok(())
}

fn cmd_divergence(a: &DivergenceArgs) -> Result<(), Fail> {
    let p = load_program(&a.program)?;
    let report = classify_divergence(&p).map_err(|e| Fail::Semantic(e.to_string()))?;
    if let Some(out) = &a.out {
        let mut s = serde_json::to_string_pretty(&report).expect("report serialization");
        s.push('\n');
        write_bytes(out, s.as_bytes())?;
    }
    println!("#Divergent\t{}", report.n_divergent);
    println!("#Non-divergent\t{}", report.n_non_divergent);
    Ok(())
}

fn cmd_plan(a: &PlanArgs) -> Result<(), Fail> {
    let p = load_program(&a.program)?;
    let plan = plan_program(&p).map_err(|e| Fail::Semantic(e.to_string()))?;
    write_bytes(&a.out, plan.to_json_string().as_bytes())
}

fn cmd_profile(a: &ProfileArgs) -> Result<(), Fail> {
    let plan: ProgramPlan = {
        let text = read_text(&a.plan)?;
        ProgramPlan::from_json_str(&text).map_err(|e| Fail::Schema(a.plan.clone(), e.to_string()))?
    };
    let layout = FeatureLayout::new(&plan);
    let events = load_traces(&a.traces)?;
    let profile = build_profile(&events, &layout, a.mode.into())
        .map_err(|e| Fail::Semantic(e.to_string()))?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &profile.records, layout.global_width()).expect("in-memory csv write");
    write_bytes(&a.csv, &csv)?;
    let chains = ChainFile::from_profile(&profile);
    write_bytes(&a.chains, chains.to_json_string().as_bytes())?;
    log::info!(
        "profiled {} events into {} records, {} chains",
        events.len(),
        profile.records.len(),
        chains.chains.len()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), Fail> {
    let text = read_text(&a.csv)?;
    let records = read_csv(&text).map_err(|e| Fail::Schema(a.csv.clone(), e.to_string()))?;
    let model = train_tree(&records, a.depth).map_err(|e| Fail::Semantic(e.to_string()))?;
    write_bytes(&a.out, tree::to_text(&model).as_bytes())?;
    log::info!(
        "trained on {} records: depth {} of {}, {} nodes",
        records.len(),
        model.depth(),
        a.depth,
        model.nodes().len()
    );
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), Fail> {
    let p = load_program(&a.program)?;
    let plan: ProgramPlan = {
        let text = read_text(&a.plan)?;
        ProgramPlan::from_json_str(&text).map_err(|e| Fail::Schema(a.plan.clone(), e.to_string()))?
    };
    let model = load_model(&a.model)?;
    let chains: ChainFile = {
        let text = read_text(&a.chains)?;
        ChainFile::from_json_str(&text).map_err(|e| Fail::Schema(a.chains.clone(), e.to_string()))?
    };
    let oracle: CleanReplayOracle = {
        let text = read_text(&a.oracle)?;
        CleanReplayOracle::from_json_str(&text)
            .map_err(|e| Fail::Schema(a.oracle.clone(), e.to_string()))?
    };
    let events = load_traces(std::slice::from_ref(&a.trace))?;
    let policy = Policy {
        mode: a.mode.into(),
        lazy_blanking: a.lazy_blanking.is_on(),
    };
    let sim = simulate(&p, &plan, &model, &chains, &oracle, &events, policy)
        .map_err(|e| Fail::Semantic(e.to_string()))?;
    write_bytes(&a.report, sim.report.to_json_string().as_bytes())?;
    if let Some(ev_path) = &a.events {
        write_bytes(ev_path, events_jsonl(&sim).as_bytes())?;
    }
    if a.verify {
        let violations = verify_event_log(&sim.log, &permanent_set(&p), &chains, policy.mode);
        if !violations.is_empty() {
            let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Fail::Semantic(format!(
                "event log violates {} invariant(s):\n{}",
                violations.len(),
                lines.join("\n")
            )));
        }
    }
    log::info!(
        "replayed {} events: {} windows, accuracy {:.2}%",
        events.len(),
        sim.report.total.calls,
        sim.report.total.accuracy_percent
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<(), Fail> {
    let p = load_program(&a.program)?;
    let sim: SimulationReport = {
        let text = read_text(&a.sim_report)?;
        SimulationReport::from_json_str(&text)
            .map_err(|e| Fail::Schema(a.sim_report.clone(), e.to_string()))?
    };
    let cve: Option<CveList> = match &a.cve {
        Some(path) => {
            let text = read_text(path)?;
            Some(
                CveList::from_json_str(&text)
                    .map_err(|e| Fail::Schema(path.clone(), e.to_string()))?,
            )
        }
        None => None,
    };
    let row = BenchmarkReport::from_simulation(&a.benchmark, &p, &sim, cve.as_ref())
        .map_err(|e| Fail::Semantic(e.to_string()))?;
    write_bytes(&a.out, row.to_json_string().as_bytes())?;
    if let Some(csv_path) = &a.csv {
        let mut buf = Vec::new();
        write_report_csv(&mut buf, std::slice::from_ref(&row)).expect("in-memory csv write");
        write_bytes(csv_path, &buf)?;
    }
    Ok(())
}

/// One config drives the whole pipeline over any number of scenarios. Mode
/// settings apply to every scenario; each scenario gets its own directory
/// under `out_dir` named after it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PipelineConfig {
    out_dir: PathBuf,
    /// Loading discipline: "set" or "fullchain". Chains are profiled in the
    /// matching flavor (sets, or sequences for the chain walker).
    #[serde(default)]
    mode: PipeMode,
    #[serde(default)]
    lazy_blanking: bool,
    #[serde(default = "default_depth")]
    depth: usize,
    /// Scales whose traces feed training, in concatenation order.
    #[serde(default = "default_train_scales")]
    train_scales: Vec<Scale>,
    /// Scale replayed through the loader.
    #[serde(default = "default_test_scale")]
    test_scale: Scale,
    #[serde(default)]
    emit_events: bool,
    /// Vulnerable-function list applied to every scenario's report.
    #[serde(default)]
    cve_list: Option<PathBuf>,
    /// Inline scenario specs.
    #[serde(default)]
    scenarios: Vec<ScenarioSpec>,
    /// Paths to further spec files.
    #[serde(default)]
    scenario_files: Vec<PathBuf>,
    /// Named built-in batches: "standard" (the 17-scenario benchmark),
    /// "regime" (the surface-measurement scenario), "attacks" (the three
    /// audit scenarios).
    #[serde(default)]
    suite: Option<String>,
    /// Log filter applied when RUST_LOG and -v are absent.
    #[serde(default)]
    log: Option<String>,
}

fn default_depth() -> usize {
    10
}

fn default_train_scales() -> Vec<Scale> {
    vec![Scale::Small, Scale::Medium]
}

fn default_test_scale() -> Scale {
    Scale::Large
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PipeMode {
    #[default]
    Set,
    Fullchain,
}

impl PipeMode {
    fn sim(self) -> SimMode {
        match self {
            PipeMode::Set => SimMode::Set,
            PipeMode::Fullchain => SimMode::FullChain,
        }
    }

    fn chains(self) -> ChainMode {
        match self {
            PipeMode::Set => ChainMode::Set,
            PipeMode::Fullchain => ChainMode::Sequence,
        }
    }
}

fn builtin_suite(name: &str) -> Result<Vec<ScenarioSpec>, Fail> {
    match name {
        "standard" => Ok(corpus::standard_suite()),
        "regime" => Ok(vec![corpus::regime_scenario()]),
        "attacks" => Ok(vec![
            corpus::tampered_argument_scenario(),
            corpus::unsafe_input_scenario(),
            corpus::benign_drift_scenario(),
        ]),
        other => Err(Fail::Semantic(format!(
            "unknown suite {other:?}; available: standard, regime, attacks"
        ))),
    }
}

fn pipeline_specs(cfg: &PipelineConfig) -> Result<Vec<ScenarioSpec>, Fail> {
    let mut specs = cfg.scenarios.clone();
    for path in &cfg.scenario_files {
        let text = read_text(path)?;
        specs.push(
            ScenarioSpec::from_json_str(&text)
                .map_err(|e| Fail::Schema(path.clone(), e.to_string()))?,
        );
    }
    if let Some(name) = &cfg.suite {
        specs.extend(builtin_suite(name)?);
    }
    if specs.is_empty() {
        return Err(Fail::Semantic(
            "pipeline config names no scenarios (scenarios, scenario_files, or suite)".into(),
        ));
    }
    let mut seen = BTreeSet::new();
    for s in &specs {
        if !seen.insert(s.name.clone()) {
            return Err(Fail::Semantic(format!(
                "scenario name {:?} appears twice; names become directories and must be unique",
                s.name
            )));
        }
    }
    Ok(specs)
}

/// Everything `pipeline` does for one scenario, start to finish. Artifacts
/// land in `dir`; the benchmark row comes back for the suite table.
fn run_scenario(
    cfg: &PipelineConfig,
    cve: Option<&CveList>,
    dir: &Path,
    spec: &ScenarioSpec,
) -> Result<BenchmarkReport, Fail> {
    log::info!("scenario {}: generating", spec.name);
    let sc = corpus::generate(spec)
        .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    write_bytes(&dir.join("spec.json"), spec.to_json_string().as_bytes())?;
    write_scenario_inputs(dir, &sc)?;

    let plan = plan_program(&sc.program)
        .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    write_bytes(&dir.join("plan.json"), plan.to_json_string().as_bytes())?;
    let layout = FeatureLayout::new(&plan);

    let mut train_events = Vec::new();
    for s in &cfg.train_scales {
        train_events.extend(sc.trace(*s).iter().cloned());
    }
    let profile = build_profile(&train_events, &layout, cfg.mode.chains())
        .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    let mut csv = Vec::new();
    write_csv(&mut csv, &profile.records, layout.global_width()).expect("in-memory csv write");
    write_bytes(&dir.join("train.csv"), &csv)?;
    let chains = ChainFile::from_profile(&profile);
    write_bytes(&dir.join("chains.json"), chains.to_json_string().as_bytes())?;

    let model = train_tree(&profile.records, cfg.depth)
        .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    write_bytes(&dir.join("tree.txt"), tree::to_text(&model).as_bytes())?;

    let policy = Policy {
        mode: cfg.mode.sim(),
        lazy_blanking: cfg.lazy_blanking,
    };
    let sim = simulate(
        &sc.program,
        &plan,
        &model,
        &chains,
        &sc.oracle,
        sc.trace(cfg.test_scale),
        policy,
    )
    .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    write_bytes(&dir.join("sim.json"), sim.report.to_json_string().as_bytes())?;
    if cfg.emit_events {
        write_bytes(&dir.join("events.jsonl"), events_jsonl(&sim).as_bytes())?;
    }

    let row = BenchmarkReport::from_simulation(&spec.name, &sc.program, &sim.report, cve)
        .map_err(|e| Fail::Semantic(format!("{}: {e}", spec.name)))?;
    write_bytes(&dir.join("report.json"), row.to_json_string().as_bytes())?;
    log::info!(
        "scenario {}: accuracy {:.2}%, reduction {:.1}%",
        spec.name,
        row.accuracy_percent,
        row.metrics.reduction_percent
    );
    Ok(row)
}

fn cmd_pipeline(a: &PipelineArgs, verbose: u8) -> Result<(), Fail> {
    let cfg: PipelineConfig = load_json(&a.config)?;
    init_logger(verbose, cfg.log.as_deref());
    // Validate everything the run will touch before any stage writes.
    let specs = pipeline_specs(&cfg)?;
    let cve: Option<CveList> = match &cfg.cve_list {
        Some(path) => {
            let text = read_text(path)?;
            Some(
                CveList::from_json_str(&text)
                    .map_err(|e| Fail::Schema(path.clone(), e.to_string()))?,
            )
        }
        None => None,
    };

    let run_one = |spec: &ScenarioSpec| -> Result<BenchmarkReport, Fail> {
        run_scenario(&cfg, cve.as_ref(), &cfg.out_dir.join(&spec.name), spec)
    };
    let results: Vec<Result<BenchmarkReport, Fail>> = match a.jobs {
        Some(jobs) if jobs > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Fail::Semantic(format!("cannot build a {jobs}-thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                specs.par_iter().map(run_one).collect()
            })
        }
        _ => specs.iter().map(run_one).collect(),
    };
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.push(r?);
    }
    rows.sort_by(|a, b| a.benchmark.cmp(&b.benchmark));

    let mut suite_json = serde_json::to_string_pretty(&rows).expect("suite serialization");
    suite_json.push('\n');
    write_bytes(&cfg.out_dir.join("suite.json"), suite_json.as_bytes())?;
    let mut suite_csv = Vec::new();
    write_report_csv(&mut suite_csv, &rows).expect("in-memory csv write");
    write_bytes(&cfg.out_dir.join("suite.csv"), &suite_csv)?;

    for row in &rows {
        println!(
            "{}\taccuracy {:.2}%\treduction {:.2}%\tgadgets {:.2}%",
            row.benchmark,
            row.accuracy_percent,
            row.metrics.reduction_percent,
            row.metrics.gadget_reduction_percent
        );
    }
    Ok(())
}

fn init_logger(verbose: u8, config_level: Option<&str>) {
    let fallback = match verbose {
        0 => config_level.unwrap_or("warn"),
        1 => "info",
        _ => "debug",
    };
    let env = env_logger::Env::default().default_filter_or(fallback);
    // Repeated init (pipeline defers for its config) is a harmless no-op.
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn run(cli: &Cli) -> Result<(), Fail> {
    match &cli.cmd {
        Cmd::Pipeline(a) => return cmd_pipeline(a, cli.verbose),
        _ => init_logger(cli.verbose, None),
    }
    match &cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Divergence(a) => cmd_divergence(a),
        Cmd::Plan(a) => cmd_plan(a),
        Cmd::Profile(a) => cmd_profile(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Report(a) => cmd_report(a),
        Cmd::Pipeline(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
