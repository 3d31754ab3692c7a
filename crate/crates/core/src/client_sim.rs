//! Simulated device: idle gating, outcome oracle, lifecycle execution and the
//! request / execute / report session loop.
//!
//! Time is a logical tick counter. A request or submission costs one tick and
//! so does each executed test.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bundler::{apply_patch, BundlePatch, TestBundle};
use crate::jsonl::{self, JsonlError};
use crate::registry::{DeviceId, DeviceProfile};
use crate::scheduler::CrashReport;
use crate::testbank::{LifecycleStep, Phase, TestCase};
use crate::transport::{ErrorCode, Message, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceState {
    pub screen_on: bool,
    pub idle_mode: bool,
    /// Used fraction of memory.
    pub memory_usage: f64,
    pub battery_level: f64,
    pub charging: bool,
}

impl DeviceState {
    /// Screen off, idle, low memory use, charging on a full battery.
    pub fn idle() -> Self {
        Self {
            screen_on: false,
            idle_mode: true,
            memory_usage: 0.10,
            battery_level: 1.0,
            charging: true,
        }
    }

    pub fn in_use() -> Self {
        Self {
            screen_on: true,
            idle_mode: false,
            memory_usage: 0.60,
            battery_level: 0.50,
            charging: false,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.memory_usage) && (0.0..=1.0).contains(&self.battery_level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Memory use must be strictly below this fraction.
    pub memory: f64,
    /// Battery must be strictly above this fraction.
    pub battery: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            memory: 0.25,
            battery: 0.60,
        }
    }
}

pub fn is_suitable_time(state: &DeviceState) -> bool {
    is_suitable_time_with(state, &Thresholds::default())
}

pub fn is_suitable_time_with(state: &DeviceState, thresholds: &Thresholds) -> bool {
    let not_in_use = !state.screen_on && state.idle_mode;
    let memory_ok = state.memory_usage < thresholds.memory;
    let battery_ok = state.charging && state.battery_level > thresholds.battery;
    not_in_use && memory_ok && battery_ok
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("state trace: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("state trace entry at tick {0} has fractions outside [0, 1]")]
    OutOfRange(u64),
    #[error("state trace ticks must be strictly increasing (tick {0})")]
    Order(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: u64,
    #[serde(flatten)]
    pub state: DeviceState,
}

/// Device state over logical time. A timeline is piecewise constant: each
/// entry holds until the next one; before the first entry the device is busy.
#[derive(Debug, Clone, PartialEq)]
pub enum StateTrace {
    AlwaysIdle,
    Timeline(Vec<TraceEntry>),
}

impl StateTrace {
    pub fn timeline(entries: Vec<TraceEntry>) -> Result<Self, TraceError> {
        for (i, e) in entries.iter().enumerate() {
            if !e.state.is_valid() {
                return Err(TraceError::OutOfRange(e.tick));
            }
            if i > 0 && entries[i - 1].tick >= e.tick {
                return Err(TraceError::Order(e.tick));
            }
        }
        Ok(StateTrace::Timeline(entries))
    }

    pub fn never_idle() -> Self {
        StateTrace::Timeline(vec![TraceEntry {
            tick: 0,
            state: DeviceState::in_use(),
        }])
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let trimmed = text.trim();
        if trimmed == "always-idle" || trimmed == "\"always-idle\"" {
            return Ok(StateTrace::AlwaysIdle);
        }
        let entries: Vec<TraceEntry> = serde_json::from_str(trimmed)?;
        Self::timeline(entries)
    }

    pub fn load(path: &Path) -> Result<Self, TraceError> {
        Self::parse(&jsonl::read_to_string(path)?)
    }

    pub fn state_at(&self, tick: u64) -> Option<DeviceState> {
        match self {
            StateTrace::AlwaysIdle => Some(DeviceState::idle()),
            StateTrace::Timeline(entries) => entries.iter().take_while(|e| e.tick <= tick).last().map(|e| e.state),
        }
    }

    pub fn is_suitable(&self, tick: u64, thresholds: &Thresholds) -> bool {
        self.state_at(tick)
            .is_some_and(|s| is_suitable_time_with(&s, thresholds))
    }

    /// First tick after `tick` at which the state changes to a suitable one.
    pub fn next_suitable_after(&self, tick: u64, thresholds: &Thresholds) -> Option<u64> {
        match self {
            StateTrace::AlwaysIdle => Some(tick + 1),
            StateTrace::Timeline(entries) => entries
                .iter()
                .find(|e| e.tick > tick && is_suitable_time_with(&e.state, thresholds))
                .map(|e| e.tick),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum RuleOutcome {
    Pass,
    Fail { error_kind: String, message: String },
    Crash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelMatch {
    Exact(u32),
    Range { min: Option<u32>, max: Option<u32> },
}

impl LevelMatch {
    fn matches(&self, level: u32) -> bool {
        match *self {
            LevelMatch::Exact(l) => l == level,
            LevelMatch::Range { min, max } => min.is_none_or(|m| level >= m) && max.is_none_or(|m| level <= m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRule {
    pub api: String,
    pub brand: Option<String>,
    pub model: Option<String>,
    pub api_level: Option<LevelMatch>,
    /// Restricts the rule to one lifecycle step; otherwise it applies to the
    /// TEST step.
    pub step: Option<String>,
    pub outcome: RuleOutcome,
}

impl OracleRule {
    pub fn new(api: &str, outcome: RuleOutcome) -> Self {
        Self {
            api: api.to_string(),
            brand: None,
            model: None,
            api_level: None,
            step: None,
            outcome,
        }
    }

    pub fn brand(mut self, brand: &str) -> Self {
        self.brand = Some(brand.to_string());
        self
    }

    pub fn model(mut self, model: &str) -> Self {
        self.model = Some(model.to_string());
        self
    }

    pub fn level(mut self, level: LevelMatch) -> Self {
        self.api_level = Some(level);
        self
    }

    pub fn step(mut self, step_id: &str) -> Self {
        self.step = Some(step_id.to_string());
        self
    }

    // model > brand > api level > api only
    fn specificity(&self) -> u8 {
        if self.model.is_some() {
            3
        } else if self.brand.is_some() {
            2
        } else if self.api_level.is_some() {
            1
        } else {
            0
        }
    }

    fn matches_device(&self, profile: &DeviceProfile) -> bool {
        self.brand.as_ref().is_none_or(|b| *b == profile.brand)
            && self.model.as_ref().is_none_or(|m| *m == profile.model)
            && self.api_level.is_none_or(|l| l.matches(profile.api_level))
    }
}

/// On-disk form of an oracle rule.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct RuleLine {
    api: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    brand: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_level: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_level_min: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_level_max: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<String>,
    outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error_kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<String>,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("line {line}: {reason}")]
    Invalid { line: usize, reason: String },
}

impl TryFrom<RuleLine> for OracleRule {
    type Error = String;

    fn try_from(line: RuleLine) -> Result<Self, String> {
        if line.api.is_empty() {
            return Err("api must not be empty".into());
        }
        let api_level = match (line.api_level, line.api_level_min, line.api_level_max) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                return Err("api_level cannot be combined with api_level_min/max".into())
            }
            (Some(l), None, None) => Some(LevelMatch::Exact(l)),
            (None, None, None) => None,
            (None, min, max) => Some(LevelMatch::Range { min, max }),
        };
        let outcome = match line.outcome.to_ascii_lowercase().as_str() {
            "pass" => RuleOutcome::Pass,
            "crash" => RuleOutcome::Crash,
            "fail" => {
                let error_kind = line.error_kind.unwrap_or_default();
                if error_kind.is_empty() {
                    return Err("fail outcome needs a nonempty error_kind".into());
                }
                RuleOutcome::Fail {
                    error_kind,
                    message: line.message.unwrap_or_default(),
                }
            }
            other => return Err(format!("unknown outcome {other:?}")),
        };
        Ok(OracleRule {
            api: line.api,
            brand: line.brand,
            model: line.model,
            api_level,
            step: line.step,
            outcome,
        })
    }
}

impl From<&OracleRule> for RuleLine {
    fn from(rule: &OracleRule) -> Self {
        let mut line = RuleLine {
            api: rule.api.clone(),
            brand: rule.brand.clone(),
            model: rule.model.clone(),
            step: rule.step.clone(),
            ..RuleLine::default()
        };
        match rule.api_level {
            Some(LevelMatch::Exact(l)) => line.api_level = Some(l),
            Some(LevelMatch::Range { min, max }) => {
                line.api_level_min = min;
                line.api_level_max = max;
            }
            None => {}
        }
        match &rule.outcome {
            RuleOutcome::Pass => line.outcome = "pass".into(),
            RuleOutcome::Crash => line.outcome = "crash".into(),
            RuleOutcome::Fail { error_kind, message } => {
                line.outcome = "fail".into();
                line.error_kind = Some(error_kind.clone());
                line.message = Some(message.clone());
            }
        }
        line
    }
}

/// Rule table standing in for real device behaviour. The most specific
/// matching rule wins; among equally specific rules, the first one listed.
/// Unmatched steps pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OutcomeOracle {
    pub rules: Vec<OracleRule>,
}

impl OutcomeOracle {
    pub fn new(rules: Vec<OracleRule>) -> Self {
        Self { rules }
    }

    pub fn parse(text: &str) -> Result<Self, OracleError> {
        let rows: Vec<(usize, RuleLine)> = jsonl::parse_lines(text)?;
        let rules = rows
            .into_iter()
            .map(|(line, raw)| OracleRule::try_from(raw).map_err(|reason| OracleError::Invalid { line, reason }))
            .collect::<Result<_, _>>()?;
        Ok(Self { rules })
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        Self::parse(&jsonl::read_to_string(path)?)
    }

    pub fn to_jsonl(&self) -> String {
        self.rules
            .iter()
            .map(|r| serde_json::to_string(&RuleLine::from(r)).expect("rule serializes") + "\n")
            .collect()
    }

    /// Outcome of running `step` of a test against `api` on `profile`.
    pub fn resolve(&self, api: &str, step: &LifecycleStep, profile: &DeviceProfile) -> RuleOutcome {
        let mut best: Option<&OracleRule> = None;
        for rule in &self.rules {
            if rule.api != api || !rule.matches_device(profile) {
                continue;
            }
            let step_ok = match &rule.step {
                Some(id) => *id == step.step_id,
                None => step.phase == Phase::Test,
            };
            if !step_ok {
                continue;
            }
            if best.is_none_or(|b| rule.specificity() > b.specificity()) {
                best = Some(rule);
            }
        }
        best.map_or(RuleOutcome::Pass, |r| r.outcome.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Pass,
    Fail {
        error_kind: String,
        message: String,
        failed_phase: Phase,
    },
    /// The test crashed the runner; it counts as executed.
    Crash,
    /// Dispatched but dropped after an earlier crash in its batch.
    SkippedCrash,
}

impl Outcome {
    pub fn is_executed(&self) -> bool {
        !matches!(self, Outcome::SkippedCrash)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub test_id: String,
    pub target_api: String,
    pub device: DeviceId,
    pub outcome: Outcome,
    pub batch_index: u64,
    /// Logical tick at which the test finished.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseOutcome {
    Pass,
    Fail {
        error_kind: String,
        message: String,
        failed_phase: Phase,
    },
    Crash,
}

/// A single test execution with the lifecycle steps that actually ran.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRun {
    pub outcome: CaseOutcome,
    pub steps: Vec<LifecycleStep>,
}

impl CaseRun {
    pub fn into_result(self, test: &TestCase, device: &DeviceId, batch_index: u64, timestamp: u64) -> ExecutionResult {
        let outcome = match self.outcome {
            CaseOutcome::Pass => Outcome::Pass,
            CaseOutcome::Crash => Outcome::Crash,
            CaseOutcome::Fail {
                error_kind,
                message,
                failed_phase,
            } => Outcome::Fail {
                error_kind,
                message,
                failed_phase,
            },
        };
        ExecutionResult {
            test_id: test.id.clone(),
            target_api: test.target_api.clone(),
            device: device.clone(),
            outcome,
            batch_index,
            timestamp,
        }
    }
}

/// Runs a test's lifecycle in order. A failure in setup or the test body skips
/// the remaining setup and body steps; teardown steps always run. A crash
/// aborts immediately.
pub fn execute_case(test: &TestCase, oracle: &OutcomeOracle, profile: &DeviceProfile) -> CaseRun {
    let mut steps = Vec::with_capacity(test.lifecycle.len());
    let mut failure: Option<CaseOutcome> = None;
    for step in &test.lifecycle {
        if failure.is_some() && !step.phase.is_teardown() {
            continue;
        }
        steps.push(step.clone());
        match oracle.resolve(&test.target_api, step, profile) {
            RuleOutcome::Pass => {}
            RuleOutcome::Crash => {
                return CaseRun {
                    outcome: CaseOutcome::Crash,
                    steps,
                }
            }
            RuleOutcome::Fail { error_kind, message } => {
                if failure.is_none() {
                    failure = Some(CaseOutcome::Fail {
                        error_kind,
                        message,
                        failed_phase: step.phase,
                    });
                }
            }
        }
    }
    CaseRun {
        outcome: failure.unwrap_or(CaseOutcome::Pass),
        steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub thresholds: Thresholds,
    /// Test ids that crash the runner on this device regardless of the oracle.
    pub injected_crashes: HashSet<String>,
    pub max_ticks: u64,
    pub max_consecutive_failures: u32,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            injected_crashes: HashSet::new(),
            max_ticks: 10_000_000,
            max_consecutive_failures: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    BatchRequested {
        tick: u64,
        cursor_position: usize,
        bundle_version: u64,
        crash_report: Option<CrashReport>,
    },
    BatchReceived {
        tick: u64,
        batch_index: u64,
        start: usize,
        len: usize,
    },
    BundleUpdated {
        tick: u64,
        version: u64,
    },
    PatchRejected {
        tick: u64,
        reason: String,
    },
    Crashed {
        tick: u64,
        batch_index: u64,
        offset: usize,
    },
    ResultsSubmitted {
        tick: u64,
        batch_index: u64,
        count: usize,
        accepted: usize,
    },
    TransportFailure {
        tick: u64,
        error: String,
    },
    ServerError {
        tick: u64,
        code: ErrorCode,
        message: String,
    },
    Done {
        tick: u64,
    },
    Abandoned {
        tick: u64,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub device: DeviceId,
    pub events: Vec<SessionEvent>,
    pub finished: bool,
    pub executed: usize,
    pub final_tick: u64,
}

impl SessionLog {
    pub fn submissions(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                SessionEvent::ResultsSubmitted { count, .. } => Some(*count),
                _ => None,
            })
            .collect()
    }

    pub fn requests(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, SessionEvent::BatchRequested { .. }))
            .count()
    }
}

/// Registers a profile over `transport`.
pub fn register(transport: &mut dyn Transport, profile: &DeviceProfile) -> Result<DeviceId, String> {
    match transport.exchange(&Message::Register {
        profile: profile.clone(),
    }) {
        Ok(Message::Registered { device_id }) => Ok(device_id),
        Ok(Message::Error { code, message, .. }) => Err(format!("{code:?}: {message}")),
        Ok(other) => Err(format!("unexpected reply {other:?}")),
        Err(e) => Err(e.to_string()),
    }
}

struct Session<'a> {
    device: &'a DeviceId,
    profile: &'a DeviceProfile,
    oracle: &'a OutcomeOracle,
    options: &'a SessionOptions,
    log: SessionLog,
    tick: u64,
    bundle: TestBundle,
    cursor_position: usize,
    pending_crash: Option<CrashReport>,
    pending_results: Option<(u64, Vec<ExecutionResult>)>,
    failures: u32,
}

impl Session<'_> {
    fn event(&mut self, e: SessionEvent) {
        self.log.events.push(e);
    }

    fn failed(&mut self, e: SessionEvent) -> bool {
        self.event(e);
        self.failures += 1;
        if self.failures > self.options.max_consecutive_failures {
            let tick = self.tick;
            self.event(SessionEvent::Abandoned {
                tick,
                reason: format!("{} consecutive failures", self.failures),
            });
            return true;
        }
        false
    }

    fn apply(&mut self, patch: &BundlePatch) -> Result<(), String> {
        let base = if self.bundle.version == patch.base_version && self.bundle.checksum == patch.base_checksum {
            self.bundle.clone()
        } else if patch.is_full_snapshot() {
            TestBundle::empty_at(patch.base_version)
        } else {
            return Err(format!(
                "patch base v{} does not match local v{}",
                patch.base_version, self.bundle.version
            ));
        };
        apply_patch(&base, patch)
            .map(|b| self.bundle = b)
            .map_err(|e| e.to_string())
    }

    fn execute(&mut self, batch_index: u64, manifest: &[String]) -> Result<Vec<ExecutionResult>, String> {
        let mut results = Vec::with_capacity(manifest.len());
        for (offset, id) in manifest.iter().enumerate() {
            let test = self
                .bundle
                .get(id)
                .ok_or_else(|| format!("test {id} missing from local bundle v{}", self.bundle.version))?
                .clone();
            let run = if self.options.injected_crashes.contains(id) {
                CaseRun {
                    outcome: CaseOutcome::Crash,
                    steps: Vec::new(),
                }
            } else {
                execute_case(&test, self.oracle, self.profile)
            };
            self.tick += 1;
            let crashed = run.outcome == CaseOutcome::Crash;
            results.push(run.into_result(&test, self.device, batch_index, self.tick));
            if crashed {
                let tick = self.tick;
                self.event(SessionEvent::Crashed {
                    tick,
                    batch_index,
                    offset,
                });
                self.pending_crash = Some(CrashReport {
                    batch_index,
                    crashed_at: offset,
                });
                break;
            }
        }
        self.log.executed += results.len();
        Ok(results)
    }
}

/// Drives one device until the server answers DONE, the trace has no further
/// idle window, or the session gives up after repeated failures.
pub fn run_device(
    device: &DeviceId,
    profile: &DeviceProfile,
    transport: &mut dyn Transport,
    trace: &StateTrace,
    oracle: &OutcomeOracle,
    options: &SessionOptions,
) -> SessionLog {
    let mut s = Session {
        device,
        profile,
        oracle,
        options,
        log: SessionLog {
            device: device.clone(),
            events: Vec::new(),
            finished: false,
            executed: 0,
            final_tick: 0,
        },
        tick: 0,
        bundle: TestBundle::empty(),
        cursor_position: 0,
        pending_crash: None,
        pending_results: None,
        failures: 0,
    };

    loop {
        if s.tick >= options.max_ticks {
            let tick = s.tick;
            s.event(SessionEvent::Abandoned {
                tick,
                reason: "tick budget exhausted".into(),
            });
            break;
        }
        if !trace.is_suitable(s.tick, &options.thresholds) {
            match trace.next_suitable_after(s.tick, &options.thresholds) {
                Some(t) => {
                    s.tick = t;
                    continue;
                }
                None => break,
            }
        }
        let tick = s.tick;
        s.tick += 1;

        if let Some((batch_index, results)) = s.pending_results.take() {
            let count = results.len();
            let request = Message::Results {
                device_id: device.clone(),
                batch_index,
                results,
            };
            match transport.exchange(&request) {
                Ok(Message::Ack { accepted_count }) => {
                    s.failures = 0;
                    s.event(SessionEvent::ResultsSubmitted {
                        tick,
                        batch_index,
                        count,
                        accepted: accepted_count,
                    });
                }
                Ok(Message::Error { code, message, .. }) => {
                    // The batch is no longer current; the results cannot be
                    // accepted and are dropped.
                    if s.failed(SessionEvent::ServerError { tick, code, message }) {
                        break;
                    }
                }
                Ok(other) => {
                    if s.failed(SessionEvent::TransportFailure {
                        tick,
                        error: format!("unexpected reply {}", other.kind()),
                    }) {
                        break;
                    }
                }
                Err(e) => {
                    if let Message::Results { results, .. } = request {
                        s.pending_results = Some((batch_index, results));
                    }
                    if s.failed(SessionEvent::TransportFailure {
                        tick,
                        error: e.to_string(),
                    }) {
                        break;
                    }
                }
            }
            continue;
        }

        let request = Message::BatchRequest {
            device_id: device.clone(),
            cursor_position: s.cursor_position,
            bundle_version: s.bundle.version,
            crash_report: s.pending_crash,
        };
        s.event(SessionEvent::BatchRequested {
            tick,
            cursor_position: s.cursor_position,
            bundle_version: s.bundle.version,
            crash_report: s.pending_crash,
        });
        match transport.exchange(&request) {
            Err(e) => {
                if s.failed(SessionEvent::TransportFailure {
                    tick,
                    error: e.to_string(),
                }) {
                    break;
                }
            }
            Ok(Message::Done) => {
                s.event(SessionEvent::Done { tick });
                s.log.finished = true;
                break;
            }
            Ok(Message::Error { code, message, .. }) => {
                if s.failed(SessionEvent::ServerError { tick, code, message }) {
                    break;
                }
            }
            Ok(Message::BatchResponse {
                batch_index,
                start_position,
                manifest,
                patch,
            }) => {
                s.failures = 0;
                s.pending_crash = None;
                s.event(SessionEvent::BatchReceived {
                    tick,
                    batch_index,
                    start: start_position,
                    len: manifest.len(),
                });
                if let Some(patch) = &patch {
                    match s.apply(patch) {
                        Ok(()) => {
                            let version = s.bundle.version;
                            s.event(SessionEvent::BundleUpdated { tick, version });
                        }
                        Err(reason) => {
                            // Ask again for the same batch with a full bundle.
                            s.bundle = TestBundle::empty();
                            s.cursor_position = start_position;
                            if s.failed(SessionEvent::PatchRejected { tick, reason }) {
                                break;
                            }
                            continue;
                        }
                    }
                }
                s.cursor_position = start_position + manifest.len();
                match s.execute(batch_index, &manifest) {
                    Ok(results) => s.pending_results = Some((batch_index, results)),
                    Err(reason) => {
                        let tick = s.tick;
                        s.event(SessionEvent::Abandoned { tick, reason });
                        break;
                    }
                }
            }
            Ok(other) => {
                if s.failed(SessionEvent::TransportFailure {
                    tick,
                    error: format!("unexpected reply {}", other.kind()),
                }) {
                    break;
                }
            }
        }
    }
    s.log.final_tick = s.tick;
    s.log
}
