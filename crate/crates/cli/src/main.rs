//! `scenario-forge`: pipeline driver for scenario-based safety assessment.
//! Exit codes: 0 success, 1 invariant/validation failure, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scenario_forge::canonical::to_canonical_json_pretty;
use scenario_forge::db::{DbError, ScenarioDb};
use scenario_forge::decompose::{decompose_log, timeline_csv};
use scenario_forge::genscen::{generate_batch, verify_scenarios, TestScenario};
use scenario_forge::ingest::{clean_log, parse_log, resample_log, DrivingLog};
use scenario_forge::mining::{default_patterns, extract_class, mine_scenarios, ActivityPattern};
use scenario_forge::report::{aggregate, render_json, render_text};
use scenario_forge::road::builtin_library;
use scenario_forge::simulate::{run_scenario, trace_csv, SimulationResult};
use scenario_forge::synthetic::{constant_velocity_log, two_overtakes_log};
use scenario_forge::TagQuery;

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "scenario-forge", version, about = "Scenario-based safety assessment pipeline")]
struct Cli {
    /// Scenario database directory.
    #[arg(long, global = true, env = "SCENARIO_FORGE_DB")]
    db: Option<PathBuf>,
    /// Pipeline configuration file (JSON); defaults apply per key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, clean, resample and store a driving log.
    Ingest(IngestArgs),
    /// Detect events and activities of a stored log.
    Decompose(DecomposeArgs),
    /// Mine pattern-matching scenarios from a decomposed log.
    Mine(MineArgs),
    /// Collect scenarios of one pattern into a class and fit densities.
    Fit(FitArgs),
    /// Sample a class and synthesize a batch of test scenarios.
    Generate(GenerateArgs),
    /// Run a batch against the modeled vehicle under test.
    Simulate(SimulateArgs),
    /// Aggregate simulation results into a safety report.
    Report(ReportArgs),
    /// Run database-wide invariant checks.
    Audit,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV log file (t,actor,is_ego,x,y,v,a,heading,lane_index).
    path: Option<PathBuf>,
    /// Use a shipped synthetic log instead of a file:
    /// `two-overtakes` or `constant-velocity`.
    #[arg(long, conflicts_with = "path")]
    builtin: Option<String>,
    /// Source identifier stored with the log; defaults to the file stem.
    #[arg(long)]
    source_id: Option<String>,
}

#[derive(Args)]
struct DecomposeArgs {
    log_id: String,
    /// Also write the per-actor mode timeline as CSV.
    #[arg(long, value_name = "FILE")]
    dump_timeline: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    log_id: String,
    /// JSON file with an activity-pattern library; defaults to the
    /// built-in four patterns.
    #[arg(long, value_name = "FILE")]
    patterns: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Name for the stored scenario class.
    class: String,
    /// Mined pattern to collect; defaults to the class name.
    #[arg(long)]
    pattern: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    class: String,
    #[arg(short, long, default_value_t = 10)]
    n: usize,
    /// Tail-bias bandwidth inflation factor.
    #[arg(long, default_value_t = 2.0)]
    tail_c: f64,
    /// Tag query selecting the road network.
    #[arg(long, default_value = "road:motorway")]
    road_query: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Screen for criticality and append fault variants.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct SimulateArgs {
    batch: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives results.json (and traces with --trace).
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker thread bound; 0 = all cores.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Also write a per-step trace CSV per scenario.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// results.json file, or the directory containing it.
    results: PathBuf,
    batch: PathBuf,
    /// Output file; .txt renders the text report, anything else JSON.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

// ---------------------------------------------------------------- errors

struct CliError {
    kind: &'static str,
    message: String,
    exit: u8,
}

impl CliError {
    fn invariant(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            exit: 1,
        }
    }

    fn usage(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            exit: 2,
        }
    }
}

macro_rules! from_error {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::invariant($kind, e)
            }
        }
    };
}

from_error!(DbError, "Db");
from_error!(scenario_forge::ingest::IngestError, "Ingest");
from_error!(scenario_forge::decompose::DecomposeError, "Decompose");
from_error!(scenario_forge::mining::MiningError, "Mining");
from_error!(scenario_forge::genscen::GenError, "Generation");
from_error!(scenario_forge::simulate::SimError, "Simulation");
from_error!(scenario_forge::report::ReportError, "Report");
from_error!(scenario_forge::tags::TagError, "TagQuery");
from_error!(std::io::Error, "Io");
from_error!(serde_json::Error, "Serialization");

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            #[derive(Serialize)]
            struct Wire<'a> {
                kind: &'a str,
                message: &'a str,
            }
            #[derive(Serialize)]
            struct Envelope<'a> {
                error: Wire<'a>,
            }
            let env = Envelope {
                error: Wire {
                    kind: e.kind,
                    message: &e.message,
                },
            };
            eprintln!("{}", serde_json::to_string(&env).unwrap());
            ExitCode::from(e.exit)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => {
            PipelineConfig::load(path).map_err(|m| CliError::usage("Config", m))?
        }
        None => PipelineConfig::default(),
    };
    let open_db = || -> Result<ScenarioDb, CliError> {
        let root = cli.db.clone().ok_or_else(|| {
            CliError::usage("Usage", "no database: pass --db or set SCENARIO_FORGE_DB")
        })?;
        Ok(ScenarioDb::open(root)?)
    };

    match cli.command {
        Command::Ingest(args) => cmd_ingest(&open_db()?, &cfg, args),
        Command::Decompose(args) => cmd_decompose(&open_db()?, &cfg, args),
        Command::Mine(args) => cmd_mine(&open_db()?, &cfg, args),
        Command::Fit(args) => cmd_fit(&open_db()?, args),
        Command::Generate(args) => cmd_generate(&open_db()?, &cfg, args),
        Command::Simulate(args) => cmd_simulate(&cfg, args),
        Command::Report(args) => cmd_report(&cfg, args),
        Command::Audit => cmd_audit(&open_db()?),
    }
}

// ---------------------------------------------------------------- commands

fn cmd_ingest(db: &ScenarioDb, cfg: &PipelineConfig, args: IngestArgs) -> Result<(), CliError> {
    let raw: DrivingLog = match (&args.path, args.builtin.as_deref()) {
        (Some(path), None) => {
            let source = args.source_id.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "log".to_string())
            });
            parse_log(path, &source)?
        }
        (None, Some("two-overtakes")) => two_overtakes_log(),
        (None, Some("constant-velocity")) => constant_velocity_log(),
        (None, Some(other)) => {
            return Err(CliError::usage(
                "UnknownBuiltin",
                format!("no builtin log named '{other}'"),
            ))
        }
        // clap's conflicts_with rules out both being present.
        _ => return Err(CliError::usage("Usage", "pass a log file or --builtin")),
    };
    let (mut cleaned, report) = clean_log(&raw, &cfg.cleaning)?;
    if let Some(dt) = cfg.resample_dt {
        cleaned = resample_log(&cleaned, dt)?;
    }
    let log_id = db.store_log(&cleaned)?;
    #[derive(Serialize)]
    struct Out {
        log_id: String,
        actors: usize,
        dt: f64,
        cleaning: scenario_forge::ingest::CleaningReport,
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Out {
            log_id,
            actors: cleaned.actors.len(),
            dt: cleaned.dt,
            cleaning: report,
        })?
    );
    Ok(())
}

fn cmd_decompose(
    db: &ScenarioDb,
    cfg: &PipelineConfig,
    args: DecomposeArgs,
) -> Result<(), CliError> {
    let log = db.load_log(&args.log_id)?;
    let decomp = decompose_log(&log, &cfg.thresholds)?;
    db.store_decomposition(&args.log_id, &decomp)?;
    if let Some(path) = &args.dump_timeline {
        std::fs::write(path, timeline_csv(&decomp))?;
    }
    for (actor, d) in &decomp.actors {
        println!(
            "{actor}: {} events, {} activities",
            d.events.len(),
            d.activities.len()
        );
    }
    Ok(())
}

fn cmd_mine(db: &ScenarioDb, cfg: &PipelineConfig, args: MineArgs) -> Result<(), CliError> {
    let log = db.load_log(&args.log_id)?;
    let decomp = match db.load_decomposition(&args.log_id) {
        Ok(d) => d,
        Err(DbError::NotFound(_)) => {
            let d = decompose_log(&log, &cfg.thresholds)?;
            db.store_decomposition(&args.log_id, &d)?;
            d
        }
        Err(e) => return Err(e.into()),
    };
    let patterns: Vec<ActivityPattern> = match &args.patterns {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => default_patterns(),
    };
    let taxonomy = db.taxonomy()?;
    let scenarios = mine_scenarios(&log, &decomp, &patterns, &taxonomy)?;
    for record in &scenarios {
        let id = db.store_scenario(record)?;
        println!(
            "{id} {} [{:.1}, {:.1}] s",
            record.pattern.as_deref().unwrap_or("-"),
            record.t_start,
            record.t_end
        );
    }
    println!("mined {} scenarios", scenarios.len());
    Ok(())
}

fn cmd_fit(db: &ScenarioDb, args: FitArgs) -> Result<(), CliError> {
    let pattern = args.pattern.as_deref().unwrap_or(&args.class);
    let mut members = Vec::new();
    for id in db.list_scenarios()? {
        let record = db.fetch_scenario(&id)?;
        if record.pattern.as_deref() == Some(pattern) {
            members.push(record);
        }
    }
    if members.is_empty() {
        return Err(CliError::invariant(
            "NoMembers",
            format!("no stored scenarios mined from pattern '{pattern}'"),
        ));
    }
    let doc = extract_class(&args.class, &members)?;
    db.store_class(&doc)?;
    let fitted = doc.slots.iter().filter(|s| s.density.is_some()).count();
    println!(
        "class '{}': {} members, {}/{} slot densities fitted",
        args.class,
        members.len(),
        fitted,
        doc.slots.len()
    );
    Ok(())
}

fn cmd_generate(db: &ScenarioDb, cfg: &PipelineConfig, args: GenerateArgs) -> Result<(), CliError> {
    let class = match db.load_class(&args.class) {
        Ok(doc) => doc,
        Err(DbError::NotFound(_)) => {
            return Err(CliError::usage(
                "UnknownClass",
                format!("no stored class named '{}'", args.class),
            ))
        }
        Err(e) => return Err(e.into()),
    };
    let taxonomy = db.taxonomy()?;
    let query = TagQuery::parse(&args.road_query)?;
    let library = builtin_library();
    let mut batch = generate_batch(
        &class,
        &query,
        &library,
        &taxonomy,
        args.n,
        args.tail_c,
        args.seed,
        &cfg.synthesis,
    )?;
    if args.verify {
        batch = verify_scenarios(&batch, &cfg.verify)?;
    }
    write_atomic(&args.out, to_canonical_json_pretty(&batch)?.as_bytes())?;
    println!("wrote {} scenarios to {}", batch.len(), args.out.display());
    Ok(())
}

fn cmd_simulate(cfg: &PipelineConfig, args: SimulateArgs) -> Result<(), CliError> {
    let batch: Vec<TestScenario> = serde_json::from_str(&std::fs::read_to_string(&args.batch)?)?;
    std::fs::create_dir_all(&args.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| CliError::invariant("Simulation", e))?;
    let results: Vec<SimulationResult> = pool.install(|| {
        scenario_forge::simulate::run_batch(
            &batch,
            &cfg.sensor,
            &cfg.controller,
            &cfg.kpi,
            cfg.sim_dt,
            args.seed,
        )
    })?;
    if args.trace {
        for ts in &batch {
            let (_, trace) =
                run_scenario(ts, &cfg.sensor, &cfg.controller, &cfg.kpi, cfg.sim_dt, args.seed)?;
            let name = format!("trace-{}-{}.csv", ts.id, ts.variant);
            write_atomic(&args.out.join(name), trace_csv(&trace).as_bytes())?;
        }
    }
    write_atomic(
        &args.out.join("results.json"),
        to_canonical_json_pretty(&results)?.as_bytes(),
    )?;
    let failures = results.iter().filter(|r| !r.kpis.pass).count();
    println!(
        "simulated {} scenarios, {} failures -> {}",
        results.len(),
        failures,
        args.out.join("results.json").display()
    );
    Ok(())
}

fn cmd_report(cfg: &PipelineConfig, args: ReportArgs) -> Result<(), CliError> {
    let results_path = if args.results.is_dir() {
        args.results.join("results.json")
    } else {
        args.results.clone()
    };
    let results: Vec<SimulationResult> =
        serde_json::from_str(&std::fs::read_to_string(&results_path)?)?;
    let batch: Vec<TestScenario> = serde_json::from_str(&std::fs::read_to_string(&args.batch)?)?;
    let report = aggregate(&results, &batch, cfg.judgment.clone())?;
    let rendered = if args.out.extension().is_some_and(|e| e == "txt") {
        render_text(&report)
    } else {
        render_json(&report)
    };
    write_atomic(&args.out, rendered.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_audit(db: &ScenarioDb) -> Result<(), CliError> {
    let violations = db.audit()?;
    if violations.is_empty() {
        println!("audit clean");
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(CliError::invariant(
        "AuditFailed",
        format!("{} invariant violations", violations.len()),
    ))
}

/// Write via a sibling temp file + rename so re-runs are all-or-nothing.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}
