use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use idlefleet_core::analyzer::{survey_scores, SurveyResponse};
use idlefleet_core::campaign::{
    compare_strategies, run_campaign, write_outputs, CampaignInputs, CampaignPaths, CrashModel,
};
use idlefleet_core::client_sim::{register, run_device, SessionOptions, StateTrace, Thresholds};
use idlefleet_core::jsonl;
use idlefleet_core::registry::load_fleet;
use idlefleet_core::testbank::{dedup_by_target_api, ingest, synthetic, TestBank};
use idlefleet_core::transport::{serve_tcp, DispatchServer, ServerConfig, TcpTransport};
use idlefleet_core::{CampaignConfig, OutcomeOracle, Strategy};

#[derive(Parser)]
#[command(
    name = "idlefleet",
    version,
    about = "Run crowdsourced compatibility-test campaigns over a simulated device fleet"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full in-process campaign and write reports.
    Run(RunArgs),
    /// Replay both dispatch strategies over shared crash traces.
    Compare(CompareArgs),
    /// Serve a test bank to TCP clients.
    Serve(ServeArgs),
    /// Run every device of a fleet file against a TCP server.
    Client(ClientArgs),
    /// Write a synthetic test bank.
    GenTests(GenTestsArgs),
    /// Score a file of 5-point survey responses.
    Survey(SurveyArgs),
}

#[derive(Args)]
struct DispatchArgs {
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = Strategy::Discard)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    redundancy: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    fleet: PathBuf,
    #[arg(long)]
    tests: PathBuf,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[command(flatten)]
    dispatch: DispatchArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    crash_prob: f64,
    /// Device state trace shared by all devices; idle throughout if omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Error-kind and brand-alias overrides.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    memory_threshold: f64,
    #[arg(long, default_value_t = 0.60)]
    battery_threshold: f64,
    #[arg(long, default_value_t = 1)]
    rebuild_penalty: u64,
    /// Dispatch every test, even several for one API.
    #[arg(long)]
    no_dedup: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long, default_value_t = 5401)]
    queue_len: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 500, 1000])]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.0015)]
    crash_prob: f64,
    #[arg(long, default_value_t = 50)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON array of crashing queue positions; replaces the Bernoulli model.
    #[arg(long)]
    crash_trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rebuild_penalty: u64,
    /// Also write comparison.json and comparison.md here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7700")]
    addr: String,
    #[arg(long)]
    tests: PathBuf,
    #[command(flatten)]
    dispatch: DispatchArgs,
    /// Start dispatching once this many devices have registered.
    #[arg(long)]
    expect_devices: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    no_dedup: bool,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7700")]
    addr: String,
    #[arg(long)]
    fleet: PathBuf,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    memory_threshold: f64,
    #[arg(long, default_value_t = 0.60)]
    battery_threshold: f64,
}

#[derive(Args)]
struct GenTestsArgs {
    #[arg(long, default_value_t = 5401)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SurveyArgs {
    /// JSON Lines of {"question_id", "rating"}.
    #[arg(long)]
    responses: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = dispatch(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Client(a) => cmd_client(a),
        Command::GenTests(a) => cmd_gen_tests(a),
        Command::Survey(a) => cmd_survey(a),
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let config = CampaignConfig {
        batch_size: a.dispatch.batch_size,
        strategy: a.dispatch.strategy,
        redundancy: a.dispatch.redundancy,
        seed: a.seed,
        thresholds: Thresholds {
            memory: a.memory_threshold,
            battery: a.battery_threshold,
        },
        crash_probability: a.crash_prob,
        rebuild_penalty: a.rebuild_penalty,
        dedup: !a.no_dedup,
    };
    let inputs = CampaignInputs::load(&CampaignPaths {
        fleet: a.fleet,
        tests: a.tests,
        oracle: a.oracle,
        trace: a.trace,
        taxonomy: a.taxonomy,
    })?;
    let run = run_campaign(&config, &inputs)?;
    write_outputs(&run, &a.out)?;
    let t = &run.report.totals;
    println!(
        "{} devices, {} tests: executed {}/{} ({:.1}%), {} issues; report in {}",
        run.report.fleet_size,
        run.report.test_count,
        t.executed,
        t.queued,
        t.coverage_pct,
        run.report.issues.len(),
        a.out.display()
    );
    Ok(())
}

fn read_positions(path: &Path) -> Result<BTreeSet<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{}: expected a JSON array of positions", path.display()))
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let model = match &a.crash_trace {
        Some(p) => CrashModel::Trace {
            positions: read_positions(p)?,
        },
        None => CrashModel::Bernoulli {
            probability: a.crash_prob,
            runs: a.runs,
            seed: a.seed,
        },
    };
    let table = compare_strategies(a.queue_len, &model, &a.batch_sizes, a.rebuild_penalty)?;
    print!("{}", table.to_markdown());
    if let Some(out) = a.out {
        fs::create_dir_all(&out)?;
        fs::write(
            out.join("comparison.json"),
            serde_json::to_string_pretty(&table)? + "\n",
        )?;
        fs::write(out.join("comparison.md"), table.to_markdown())?;
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    if a.expect_devices == 0 {
        bail!("--expect-devices must be at least 1");
    }
    let mut cases = ingest(&a.tests)?;
    if !a.no_dedup {
        cases = dedup_by_target_api(&cases);
    }
    let config = ServerConfig {
        batch_size: a.dispatch.batch_size,
        strategy: a.dispatch.strategy,
        redundancy: a.dispatch.redundancy,
    };
    let server = Arc::new(DispatchServer::new(config, TestBank::new(cases)?).with_auto_start(a.expect_devices));
    let handle = serve_tcp(Arc::clone(&server), &a.addr).with_context(|| format!("binding {}", a.addr))?;
    log::info!(
        "listening on {}, waiting for {} devices",
        handle.local_addr(),
        a.expect_devices
    );
    while !(server.is_dispatching() && server.all_finished()) {
        thread::sleep(Duration::from_millis(50));
    }
    handle.shutdown();
    fs::create_dir_all(&a.out)?;
    let results = server.sink().snapshot();
    let body: String = results
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    let path = a.out.join("results.jsonl");
    fs::write(&path, body)?;
    println!("all devices done; {} results in {}", results.len(), path.display());
    Ok(())
}

fn cmd_client(a: ClientArgs) -> Result<()> {
    let fleet = load_fleet(&a.fleet)?;
    let oracle = match &a.oracle {
        Some(p) => OutcomeOracle::load(p)?,
        None => OutcomeOracle::default(),
    };
    let trace = match &a.trace {
        Some(p) => StateTrace::load(p)?,
        None => StateTrace::AlwaysIdle,
    };
    let options = SessionOptions {
        thresholds: Thresholds {
            memory: a.memory_threshold,
            battery: a.battery_threshold,
        },
        ..SessionOptions::default()
    };
    // register the whole fleet before any session asks for work
    let mut connected = Vec::with_capacity(fleet.len());
    for profile in &fleet {
        let mut transport = TcpTransport::connect(&a.addr).with_context(|| format!("connecting to {}", a.addr))?;
        let id = register(&mut transport, profile).map_err(anyhow::Error::msg)?;
        connected.push((id, profile, transport));
    }
    let logs: Vec<_> = thread::scope(|scope| {
        let handles: Vec<_> = connected
            .into_iter()
            .map(|(id, profile, mut transport)| {
                let (oracle, trace, options) = (&oracle, &trace, &options);
                scope.spawn(move || run_device(&id, profile, &mut transport, trace, oracle, options))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("session thread")).collect()
    });
    for log in &logs {
        println!(
            "{}: executed {}, {} ticks, {}",
            log.device,
            log.executed,
            log.final_tick,
            if log.finished { "done" } else { "incomplete" }
        );
    }
    Ok(())
}

fn cmd_gen_tests(a: GenTestsArgs) -> Result<()> {
    let body: String = synthetic(a.count)
        .iter()
        .map(|c| serde_json::to_string(c).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    fs::write(&a.out, body).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn cmd_survey(a: SurveyArgs) -> Result<()> {
    let responses: Vec<SurveyResponse> = jsonl::read_lines(&a.responses)?.into_iter().map(|(_, r)| r).collect();
    println!("| question | responses | CES | CSS | NPS |");
    println!("|---|---|---|---|---|");
    for q in survey_scores(&responses)? {
        println!(
            "| Q{} | {} | {}% | {}% | {}% |",
            q.question_id,
            q.responses,
            q.ces.whole_percent(),
            q.css_whole_percent(),
            q.nps.whole_percent()
        );
    }
    Ok(())
}
