//! End-to-end campaigns: register the fleet, allocate, run every device
//! session against the dispatch server, then analyze what came back.
//!
//! Everything is deterministic given the config and seed. Device sessions run
//! on separate threads, but per-device randomness is derived from the seed and
//! the device id, and the report is assembled only after all sessions finish.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{
    build_matrix, detect_issues, CompatibilityIssue, ErrorTaxonomy, FlakyEntry, IssueKind, IssueScope, TaxonomyError,
};
use crate::bundler::fnv1a64;
use crate::client_sim::{
    register, run_device, ExecutionResult, OracleError, OutcomeOracle, SessionLog, SessionOptions, StateTrace,
    Thresholds, TraceError,
};
use crate::registry::{load_fleet, DeviceId, DeviceProfile, FleetError};
use crate::scheduler::{replay, Assignment, SchedulerError, Strategy};
use crate::testbank::{dedup_by_target_api, ingest, BankError, TestBank, TestCase};
use crate::transport::{DispatchServer, InProcess, ServerConfig, ServerError};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fleet: {0}")]
    Fleet(#[from] FleetError),
    #[error("test bank: {0}")]
    Bank(#[from] BankError),
    #[error("oracle: {0}")]
    Oracle(#[from] OracleError),
    #[error("state trace: {0}")]
    Trace(#[from] TraceError),
    #[error("taxonomy: {0}")]
    Taxonomy(#[from] TaxonomyError),
    #[error("registration failed: {0}")]
    Registration(String),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub batch_size: usize,
    pub strategy: Strategy,
    pub redundancy: usize,
    pub seed: u64,
    pub thresholds: Thresholds,
    /// Per-test chance that a test crashes the runner on a given device.
    pub crash_probability: f64,
    /// Extra ticks charged per re-batched test under rebuild.
    pub rebuild_penalty: u64,
    /// Keep only the shortest test per target API before dispatch.
    pub dedup: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            strategy: Strategy::Discard,
            redundancy: 1,
            seed: 0,
            thresholds: Thresholds::default(),
            crash_probability: 0.0,
            rebuild_penalty: 1,
            dedup: true,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<(), CampaignError> {
        if self.batch_size == 0 {
            return Err(CampaignError::Config("batch_size must be at least 1".into()));
        }
        if self.redundancy == 0 {
            return Err(CampaignError::Config("redundancy must be at least 1".into()));
        }
        for (name, v) in [("memory", self.thresholds.memory), ("battery", self.thresholds.battery)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CampaignError::Config(format!("{name} threshold {v} outside (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.crash_probability) {
            return Err(CampaignError::Config(format!(
                "crash probability {} outside [0, 1]",
                self.crash_probability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CampaignInputs {
    pub fleet: Vec<DeviceProfile>,
    pub tests: Vec<TestCase>,
    pub oracle: OutcomeOracle,
    pub trace: StateTrace,
    pub taxonomy: ErrorTaxonomy,
}

#[derive(Debug, Clone, Default)]
pub struct CampaignPaths {
    pub fleet: PathBuf,
    pub tests: PathBuf,
    pub oracle: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub taxonomy: Option<PathBuf>,
}

impl CampaignInputs {
    pub fn load(paths: &CampaignPaths) -> Result<Self, CampaignError> {
        Ok(Self {
            fleet: load_fleet(&paths.fleet)?,
            tests: ingest(&paths.tests)?,
            oracle: match &paths.oracle {
                Some(p) => OutcomeOracle::load(p)?,
                None => OutcomeOracle::default(),
            },
            trace: match &paths.trace {
                Some(p) => StateTrace::load(p)?,
                None => StateTrace::AlwaysIdle,
            },
            taxonomy: match &paths.taxonomy {
                Some(p) => ErrorTaxonomy::load(p)?,
                None => ErrorTaxonomy::default(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device: DeviceId,
    pub brand: String,
    pub model: String,
    pub api_level: u32,
    pub queue_len: usize,
    pub executed: usize,
    pub coverage_pct: f64,
    pub skipped: usize,
    pub rebatched: usize,
    pub batches: usize,
    pub crashes: usize,
    /// One tick per executed test plus the rebuild penalty.
    pub cost_ticks: u64,
    /// Device-side logical clock at session end.
    pub session_ticks: u64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTotals {
    pub queued: usize,
    pub executed: usize,
    pub coverage_pct: f64,
    pub mean_executed_per_device: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub config: CampaignConfig,
    pub fleet_size: usize,
    pub test_count: usize,
    pub devices: Vec<DeviceReport>,
    pub totals: CoverageTotals,
    pub issues: Vec<CompatibilityIssue>,
    pub issues_by_kind: BTreeMap<IssueKind, usize>,
    pub issues_by_scope: BTreeMap<IssueScope, usize>,
    pub flaky: Vec<FlakyEntry>,
    pub rejected_records: usize,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn issue(&self, api: &str) -> Option<&CompatibilityIssue> {
        self.issues.iter().find(|i| i.target_api == api)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let c = &self.config;
        let _ = writeln!(md, "# Campaign report\n");
        let _ = writeln!(
            md,
            "- strategy: {}, batch size: {}, redundancy: {}, seed: {}, crash probability: {}",
            c.strategy, c.batch_size, c.redundancy, c.seed, c.crash_probability
        );
        let _ = writeln!(
            md,
            "- devices: {}, tests dispatched: {}",
            self.fleet_size, self.test_count
        );
        let _ = writeln!(
            md,
            "- executed {} of {} queued ({:.1}%)\n",
            self.totals.executed, self.totals.queued, self.totals.coverage_pct
        );
        let _ = writeln!(md, "## Coverage\n");
        let _ = writeln!(
            md,
            "| device | brand | model | API | executed | coverage | skipped | cost (ticks) |"
        );
        let _ = writeln!(md, "|---|---|---|---|---|---|---|---|");
        for d in &self.devices {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {}/{} | {:.1}% | {} | {} |",
                d.device,
                d.brand,
                d.model,
                d.api_level,
                d.executed,
                d.queue_len,
                d.coverage_pct,
                d.skipped,
                d.cost_ticks
            );
        }
        let _ = writeln!(md, "\n## Compatibility issues ({})\n", self.issues.len());
        if !self.issues.is_empty() {
            let _ = writeln!(md, "| API | kind | scope | evidence |");
            let _ = writeln!(md, "|---|---|---|---|");
            for issue in &self.issues {
                let evidence: Vec<String> = issue
                    .evidence
                    .iter()
                    .map(|g| {
                        let devices: Vec<String> = g
                            .devices
                            .iter()
                            .map(|d| format!("{} {} ({})", d.brand, d.model, d.api_level))
                            .collect();
                        format!("{}: {}", g.outcome, devices.join(", "))
                    })
                    .collect();
                let _ = writeln!(
                    md,
                    "| `{}` | {} | {} | {} |",
                    issue.target_api,
                    label(&issue.kind),
                    label(&issue.scope),
                    evidence.join("; ")
                );
            }
        }
        if !self.flaky.is_empty() {
            let _ = writeln!(md, "\n## Flaky (excluded)\n");
            for f in &self.flaky {
                let seen: Vec<String> = f.observed.iter().map(ToString::to_string).collect();
                let _ = writeln!(md, "- `{}` on {}: {}", f.target_api, f.device, seen.join(" / "));
            }
        }
        md
    }
}

/// The wire name of a unit enum variant.
fn label<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

/// Everything a campaign produced.
#[derive(Debug, Clone)]
pub struct CampaignRun {
    pub report: CampaignReport,
    /// Result store in (device, batch, queue position) order.
    pub results: Vec<ExecutionResult>,
    pub sessions: Vec<SessionLog>,
    pub assignment: Assignment,
}

fn device_rng(seed: u64, device: &DeviceId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(device.as_str().as_bytes()))
}

/// Tests in `queue` that crash on `device` under a per-test Bernoulli model.
pub fn injected_crashes(seed: u64, device: &DeviceId, queue: &[String], probability: f64) -> BTreeSet<String> {
    if probability <= 0.0 {
        return BTreeSet::new();
    }
    let mut rng = device_rng(seed, device);
    queue.iter().filter(|_| rng.gen_bool(probability)).cloned().collect()
}

/// Executed-test count per device, recomputed from the result store alone.
pub fn executed_from_store(results: &[ExecutionResult]) -> BTreeMap<DeviceId, usize> {
    let mut seen: BTreeMap<DeviceId, BTreeSet<&str>> = BTreeMap::new();
    for r in results.iter().filter(|r| r.outcome.is_executed()) {
        seen.entry(r.device.clone()).or_default().insert(&r.test_id);
    }
    seen.into_iter().map(|(d, s)| (d, s.len())).collect()
}

pub fn run_campaign(config: &CampaignConfig, inputs: &CampaignInputs) -> Result<CampaignRun, CampaignError> {
    config.validate()?;
    if inputs.fleet.is_empty() {
        return Err(CampaignError::Config("fleet is empty".into()));
    }
    let tests = if config.dedup {
        dedup_by_target_api(&inputs.tests)
    } else {
        inputs.tests.clone()
    };
    let bank = TestBank::new(tests)?;
    let server = Arc::new(DispatchServer::new(
        ServerConfig {
            batch_size: config.batch_size,
            strategy: config.strategy,
            redundancy: config.redundancy,
        },
        bank.clone(),
    ));

    let mut transport = InProcess::new(Arc::clone(&server));
    let mut devices = Vec::with_capacity(inputs.fleet.len());
    for profile in &inputs.fleet {
        let id = register(&mut transport, profile).map_err(CampaignError::Registration)?;
        devices.push((id, profile.clone()));
    }
    server.start_dispatch()?;
    let assignment = server.assignment().expect("dispatch started");

    let sessions: Vec<SessionLog> = thread::scope(|scope| {
        let handles: Vec<_> = devices
            .iter()
            .map(|(id, profile)| {
                let queue = assignment.queue(id).unwrap_or_default();
                let options = SessionOptions {
                    thresholds: config.thresholds,
                    injected_crashes: injected_crashes(config.seed, id, queue, config.crash_probability)
                        .into_iter()
                        .collect(),
                    ..SessionOptions::default()
                };
                let mut transport = InProcess::new(Arc::clone(&server));
                scope.spawn(move || run_device(id, profile, &mut transport, &inputs.trace, &inputs.oracle, &options))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("device session panicked"))
            .collect()
    });

    let mut results = server.sink().snapshot();
    let positions: HashMap<(&DeviceId, &str), usize> = assignment
        .queues
        .iter()
        .flat_map(|(d, q)| q.iter().enumerate().map(move |(i, t)| ((d, t.as_str()), i)))
        .collect();
    results.sort_by_key(|r| {
        (
            r.device.clone(),
            r.batch_index,
            positions
                .get(&(&r.device, r.test_id.as_str()))
                .copied()
                .unwrap_or(usize::MAX),
        )
    });

    let profiles: HashMap<DeviceId, DeviceProfile> = devices.iter().cloned().collect();
    let cursors: HashMap<DeviceId, _> = server.cursors().into_iter().map(|c| (c.device().clone(), c)).collect();
    let logs: HashMap<&DeviceId, &SessionLog> = sessions.iter().map(|s| (&s.device, s)).collect();

    let mut device_reports = Vec::with_capacity(devices.len());
    for (id, profile) in &devices {
        let cursor = &cursors[id];
        let coverage = cursor.coverage();
        let history = cursor.history();
        let skipped = if cursor.strategy() == Strategy::Discard {
            history.iter().map(|b| b.unexecuted().len()).sum()
        } else {
            0
        };
        let log = logs[id];
        device_reports.push(DeviceReport {
            device: id.clone(),
            brand: profile.brand.clone(),
            model: profile.model.clone(),
            api_level: profile.api_level,
            queue_len: cursor.queue_len(),
            executed: coverage.executed,
            coverage_pct: coverage.percent(),
            skipped,
            rebatched: cursor.rebatched(),
            batches: history.len(),
            crashes: history.iter().filter(|b| b.crashed_at.is_some()).count(),
            cost_ticks: coverage.executed as u64 + config.rebuild_penalty * cursor.rebatched() as u64,
            session_ticks: log.final_tick,
            finished: log.finished,
        });
    }
    let queued: usize = device_reports.iter().map(|d| d.queue_len).sum();
    let executed: usize = device_reports.iter().map(|d| d.executed).sum();
    let totals = CoverageTotals {
        queued,
        executed,
        coverage_pct: if queued == 0 {
            100.0
        } else {
            executed as f64 / queued as f64 * 100.0
        },
        mean_executed_per_device: executed as f64 / device_reports.len() as f64,
    };

    let matrix = build_matrix(&results, &profiles);
    let issues = detect_issues(&matrix, &inputs.taxonomy);
    let mut issues_by_kind = BTreeMap::new();
    let mut issues_by_scope = BTreeMap::new();
    for issue in &issues {
        *issues_by_kind.entry(issue.kind).or_insert(0) += 1;
        *issues_by_scope.entry(issue.scope).or_insert(0) += 1;
    }

    let report = CampaignReport {
        config: config.clone(),
        fleet_size: devices.len(),
        test_count: bank.len(),
        devices: device_reports,
        totals,
        issues,
        issues_by_kind,
        issues_by_scope,
        flaky: matrix.flaky,
        rejected_records: matrix.rejected,
    };
    Ok(CampaignRun {
        report,
        results,
        sessions,
        assignment,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CampaignError> {
    fs::write(path, contents).map_err(|source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `report.json`, `report.md`, `results.jsonl` and `sessions.jsonl`.
pub fn write_outputs(run: &CampaignRun, out_dir: &Path) -> Result<(), CampaignError> {
    fs::create_dir_all(out_dir).map_err(|source| CampaignError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    write_file(&out_dir.join("report.json"), &run.report.to_json())?;
    write_file(&out_dir.join("report.md"), &run.report.to_markdown())?;
    let results: String = run
        .results
        .iter()
        .map(|r| serde_json::to_string(r).expect("result serializes") + "\n")
        .collect();
    write_file(&out_dir.join("results.jsonl"), &results)?;
    let sessions: String = run
        .sessions
        .iter()
        .map(|s| serde_json::to_string(s).expect("session serializes") + "\n")
        .collect();
    write_file(&out_dir.join("sessions.jsonl"), &sessions)?;
    Ok(())
}

/// Reads the persisted result store back.
pub fn read_result_store(path: &Path) -> Result<Vec<ExecutionResult>, CampaignError> {
    let text = fs::read_to_string(path).map_err(|source| CampaignError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| CampaignError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum CrashModel {
    /// Independent per-test crashes, `runs` replicates seeded from `seed`.
    Bernoulli { probability: f64, runs: usize, seed: u64 },
    /// One fixed trace: queue positions that crash.
    Trace { positions: BTreeSet<usize> },
}

impl CrashModel {
    /// Crash traces as per-position flags; shared by every strategy and
    /// batch size so comparisons are paired.
    pub fn traces(&self, queue_len: usize) -> Vec<Vec<bool>> {
        match self {
            CrashModel::Bernoulli {
                probability,
                runs,
                seed,
            } => (0..*runs)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
                    (0..queue_len).map(|_| rng.gen_bool(*probability)).collect()
                })
                .collect(),
            CrashModel::Trace { positions } => {
                vec![(0..queue_len).map(|p| positions.contains(&p)).collect()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub runs: usize,
    pub mean_executed: f64,
    pub coverage_pct: f64,
    pub mean_cost_ticks: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub queue_len: usize,
    pub crash_model: CrashModel,
    pub rebuild_penalty: u64,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, strategy: Strategy, batch_size: usize) -> Option<&ComparisonRow> {
        self.rows
            .iter()
            .find(|r| r.strategy == strategy && r.batch_size == batch_size)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(
            md,
            "| batch size | strategy | avg. executed (coverage) | avg. cost (ticks) |"
        );
        let _ = writeln!(md, "|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.1} ({:.1}%) | {:.1} |",
                r.batch_size, r.strategy, r.mean_executed, r.coverage_pct, r.mean_cost_ticks
            );
        }
        md
    }
}

/// Replays both strategies at each batch size over identical crash traces.
pub fn compare_strategies(
    queue_len: usize,
    crash_model: &CrashModel,
    batch_sizes: &[usize],
    rebuild_penalty: u64,
) -> Result<ComparisonTable, CampaignError> {
    if let CrashModel::Bernoulli { probability, runs, .. } = crash_model {
        if !(0.0..=1.0).contains(probability) || *runs == 0 {
            return Err(CampaignError::Config(
                "crash model needs p in [0,1] and runs >= 1".into(),
            ));
        }
    }
    let traces = crash_model.traces(queue_len);
    let mut rows = Vec::new();
    for &batch_size in batch_sizes {
        for strategy in [Strategy::Discard, Strategy::Rebuild] {
            let mut executed = 0usize;
            let mut cost = 0u64;
            for trace in &traces {
                let r = replay(queue_len, batch_size, strategy, |p| trace[p])?;
                executed += r.executed_count;
                cost += r.cost_ticks(rebuild_penalty);
            }
            let n = traces.len() as f64;
            let mean_executed = executed as f64 / n;
            rows.push(ComparisonRow {
                strategy,
                batch_size,
                runs: traces.len(),
                mean_executed,
                coverage_pct: if queue_len == 0 {
                    100.0
                } else {
                    mean_executed / queue_len as f64 * 100.0
                },
                mean_cost_ticks: cost as f64 / n,
            });
        }
    }
    Ok(ComparisonTable {
        queue_len,
        crash_model: crash_model.clone(),
        rebuild_penalty,
        rows,
    })
}
