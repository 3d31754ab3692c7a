//! Test-case definitions, ingestion and per-API deduplication.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    BeforeClass,
    Before,
    Test,
    After,
    AfterClass,
}

impl Phase {
    pub fn is_setup(self) -> bool {
        matches!(self, Phase::BeforeClass | Phase::Before)
    }

    pub fn is_teardown(self) -> bool {
        matches!(self, Phase::After | Phase::AfterClass)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LifecycleStep {
    pub phase: Phase,
    pub step_id: String,
}

impl LifecycleStep {
    pub fn new(phase: Phase, step_id: &str) -> Self {
        Self {
            phase,
            step_id: step_id.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestSource {
    Aosp,
    Generated,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    /// Fully-qualified signature, e.g. `android.util.LongSparseArray#valueAt`.
    pub target_api: String,
    pub source: TestSource,
    /// Number of API invocation statements in the test body.
    pub invocation_length: u32,
    pub lifecycle: Vec<LifecycleStep>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TestCaseError {
    #[error("test id must not be empty")]
    EmptyId,
    #[error("test {0}: target_api must not be empty")]
    EmptyTargetApi(String),
    #[error("test {0}: invocation_length must be at least 1")]
    ZeroInvocations(String),
    #[error("test {id}: expected exactly one TEST step, found {found}")]
    TestStepCount { id: String, found: usize },
    #[error("test {id}: step {step_id} is out of lifecycle order")]
    PhaseOrder { id: String, step_id: String },
}

impl TestCase {
    /// A case with the full five-phase lifecycle, named after its id.
    pub fn with_standard_lifecycle(id: &str, target_api: &str, source: TestSource, invocation_length: u32) -> Self {
        let step = |phase, suffix: &str| LifecycleStep::new(phase, &format!("{id}:{suffix}"));
        Self {
            id: id.to_string(),
            target_api: target_api.to_string(),
            source,
            invocation_length,
            lifecycle: vec![
                step(Phase::BeforeClass, "beforeClass"),
                step(Phase::Before, "setUp"),
                step(Phase::Test, "test"),
                step(Phase::After, "tearDown"),
                step(Phase::AfterClass, "afterClass"),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), TestCaseError> {
        if self.id.is_empty() {
            return Err(TestCaseError::EmptyId);
        }
        if self.target_api.is_empty() {
            return Err(TestCaseError::EmptyTargetApi(self.id.clone()));
        }
        if self.invocation_length == 0 {
            return Err(TestCaseError::ZeroInvocations(self.id.clone()));
        }
        let found = self.lifecycle.iter().filter(|s| s.phase == Phase::Test).count();
        if found != 1 {
            return Err(TestCaseError::TestStepCount {
                id: self.id.clone(),
                found,
            });
        }
        for pair in self.lifecycle.windows(2) {
            if pair[1].phase < pair[0].phase {
                return Err(TestCaseError::PhaseOrder {
                    id: self.id.clone(),
                    step_id: pair[1].step_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn test_step(&self) -> &LifecycleStep {
        self.lifecycle
            .iter()
            .find(|s| s.phase == Phase::Test)
            .expect("validated test case has a TEST step")
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: TestCaseError,
    },
    #[error("duplicate test id {0}")]
    DuplicateId(String),
}

/// Reads a test bank file, preserving file order.
pub fn ingest(path: &Path) -> Result<Vec<TestCase>, BankError> {
    let text = jsonl::read_to_string(path)?;
    parse_cases(&text)
}

pub fn parse_cases(text: &str) -> Result<Vec<TestCase>, BankError> {
    let rows: Vec<(usize, TestCase)> = jsonl::parse_lines(text)?;
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(rows.len());
    for (line, case) in rows {
        case.validate().map_err(|source| BankError::Invalid { line, source })?;
        if !seen.insert(case.id.clone()) {
            return Err(BankError::DuplicateId(case.id));
        }
        cases.push(case);
    }
    Ok(cases)
}

/// Keeps one case per target API: the shortest invocation sequence, ties going
/// to the lexicographically smallest id. Survivors keep their relative order.
pub fn dedup_by_target_api(cases: &[TestCase]) -> Vec<TestCase> {
    let mut best: HashMap<&str, usize> = HashMap::new();
    for (idx, case) in cases.iter().enumerate() {
        best.entry(case.target_api.as_str())
            .and_modify(|cur| {
                let held = &cases[*cur];
                let shorter = case.invocation_length < held.invocation_length;
                let tie_smaller = case.invocation_length == held.invocation_length && case.id < held.id;
                if shorter || tie_smaller {
                    *cur = idx;
                }
            })
            .or_insert(idx);
    }
    let keep: HashSet<usize> = best.into_values().collect();
    cases
        .iter()
        .enumerate()
        .filter(|(idx, _)| keep.contains(idx))
        .map(|(_, c)| c.clone())
        .collect()
}

/// Deterministic filler bank: `count` cases each targeting a distinct API.
pub fn synthetic(count: usize) -> Vec<TestCase> {
    (0..count)
        .map(|i| {
            TestCase::with_standard_lifecycle(
                &format!("tc-{i:05}"),
                &format!("synthetic.api.Class{}#method{}", i / 16, i % 16),
                TestSource::Generated,
                1 + (i % 7) as u32,
            )
        })
        .collect()
}

/// Immutable, shareable master test list in canonical dispatch order.
#[derive(Debug, Clone)]
pub struct TestBank {
    cases: Arc<Vec<TestCase>>,
    index: Arc<HashMap<String, usize>>,
}

impl TestBank {
    pub fn new(cases: Vec<TestCase>) -> Result<Self, BankError> {
        let mut index = HashMap::with_capacity(cases.len());
        for (i, case) in cases.iter().enumerate() {
            case.validate()
                .map_err(|source| BankError::Invalid { line: i + 1, source })?;
            if index.insert(case.id.clone(), i).is_some() {
                return Err(BankError::DuplicateId(case.id.clone()));
            }
        }
        Ok(Self {
            cases: Arc::new(cases),
            index: Arc::new(index),
        })
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn get(&self, id: &str) -> Option<&TestCase> {
        self.index.get(id).map(|&i| &self.cases[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}
