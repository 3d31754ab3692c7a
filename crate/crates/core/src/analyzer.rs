//! Differential analysis of execution results across devices.
//!
//! Results are folded into a per-API matrix of one outcome summary per
//! device. An API is flagged when its summaries are not all identical, either
//! because it passes on some devices and fails on others or because it fails
//! with different error kinds. Flagged APIs are then classified by the error
//! kinds involved and scoped by where the divergence shows up.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client_sim::{ExecutionResult, Outcome};
use crate::jsonl::{self, JsonlError};
use crate::registry::{DeviceId, DeviceProfile};

/// Error kind recorded for a test that crashed the runner.
pub const CRASH_ERROR_KIND: &str = "NativeCrash";

pub const DEFAULT_SIGNATURE_KINDS: [&str; 3] = ["NoClassDefFoundError", "NoSuchMethodError", "NoSuchFieldError"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorClass {
    Signature,
    Semantics,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("taxonomy file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Signature kinds are listed explicitly; every other kind is semantics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTaxonomy {
    pub signature_kinds: BTreeSet<String>,
    /// Optional brand folding for scoping, e.g. `Honor -> Huawei`.
    #[serde(default)]
    pub brand_aliases: BTreeMap<String, String>,
}

impl Default for ErrorTaxonomy {
    fn default() -> Self {
        Self {
            signature_kinds: DEFAULT_SIGNATURE_KINDS.iter().map(|s| s.to_string()).collect(),
            brand_aliases: BTreeMap::new(),
        }
    }
}

/// Override file: extra signature kinds plus optional brand aliases.
#[derive(Debug, Default, Deserialize)]
struct TaxonomyOverride {
    #[serde(default)]
    signature_kinds: Vec<String>,
    #[serde(default)]
    brand_aliases: BTreeMap<String, String>,
}

impl ErrorTaxonomy {
    pub fn with_overrides(text: &str) -> Result<Self, TaxonomyError> {
        let extra: TaxonomyOverride = serde_json::from_str(text)?;
        let mut taxonomy = Self::default();
        taxonomy.signature_kinds.extend(extra.signature_kinds);
        taxonomy.brand_aliases = extra.brand_aliases;
        Ok(taxonomy)
    }

    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        Self::with_overrides(&jsonl::read_to_string(path)?)
    }

    pub fn brand<'a>(&'a self, brand: &'a str) -> &'a str {
        self.brand_aliases.get(brand).map_or(brand, String::as_str)
    }
}

pub fn classify_error(error_kind: &str, taxonomy: &ErrorTaxonomy) -> ErrorClass {
    if taxonomy.signature_kinds.contains(error_kind) {
        ErrorClass::Signature
    } else {
        ErrorClass::Semantics
    }
}

/// Per-device observation of one API.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "status", content = "error_kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeSummary {
    Pass,
    Fail(String),
}

impl fmt::Display for OutcomeSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutcomeSummary::Pass => f.write_str("PASS"),
            OutcomeSummary::Fail(kind) => write!(f, "FAIL({kind})"),
        }
    }
}

impl OutcomeSummary {
    /// `None` for results that are not outcomes (skipped after a crash).
    pub fn of(outcome: &Outcome) -> Option<Self> {
        match outcome {
            Outcome::Pass => Some(OutcomeSummary::Pass),
            Outcome::Fail { error_kind, .. } => Some(OutcomeSummary::Fail(error_kind.clone())),
            Outcome::Crash => Some(OutcomeSummary::Fail(CRASH_ERROR_KIND.to_string())),
            Outcome::SkippedCrash => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub profile: DeviceProfile,
    pub summary: OutcomeSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlakyEntry {
    pub target_api: String,
    pub device: DeviceId,
    pub observed: BTreeSet<OutcomeSummary>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultMatrix {
    /// target_api -> device -> consistent summary. Flaky cells are absent.
    pub apis: BTreeMap<String, BTreeMap<DeviceId, MatrixCell>>,
    pub flaky: Vec<FlakyEntry>,
    /// Records dropped because their device was not registered.
    pub rejected: usize,
}

impl ResultMatrix {
    /// Builds a matrix directly from summaries; used for fixtures and tests.
    pub fn from_cells(cells: impl IntoIterator<Item = (String, DeviceId, DeviceProfile, OutcomeSummary)>) -> Self {
        let mut apis: BTreeMap<String, BTreeMap<DeviceId, MatrixCell>> = BTreeMap::new();
        for (api, device, profile, summary) in cells {
            apis.entry(api)
                .or_default()
                .insert(device, MatrixCell { profile, summary });
        }
        Self {
            apis,
            flaky: Vec::new(),
            rejected: 0,
        }
    }
}

/// Folds results into per-(api, device) summaries. Devices observed with
/// differing outcomes for one API are flagged flaky and left out.
pub fn build_matrix<'a>(
    results: impl IntoIterator<Item = &'a ExecutionResult>,
    profiles: &HashMap<DeviceId, DeviceProfile>,
) -> ResultMatrix {
    let mut observed: BTreeMap<(String, DeviceId), BTreeSet<OutcomeSummary>> = BTreeMap::new();
    let mut rejected = 0;
    for r in results {
        if !profiles.contains_key(&r.device) {
            log::warn!("dropping result {} from unregistered device {}", r.test_id, r.device);
            rejected += 1;
            continue;
        }
        if let Some(summary) = OutcomeSummary::of(&r.outcome) {
            observed
                .entry((r.target_api.clone(), r.device.clone()))
                .or_default()
                .insert(summary);
        }
    }
    let mut matrix = ResultMatrix {
        rejected,
        ..ResultMatrix::default()
    };
    for ((api, device), summaries) in observed {
        if summaries.len() > 1 {
            matrix.flaky.push(FlakyEntry {
                target_api: api,
                device,
                observed: summaries,
            });
            continue;
        }
        let summary = summaries.into_iter().next().expect("nonempty set");
        let profile = profiles[&device].clone();
        matrix
            .apis
            .entry(api)
            .or_default()
            .insert(device, MatrixCell { profile, summary });
    }
    matrix
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueKind {
    Signature,
    Semantics,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IssueScope {
    VersionSpecific,
    VendorSpecific,
    ModelSpecific,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDevice {
    pub device: DeviceId,
    pub brand: String,
    pub model: String,
    pub api_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceGroup {
    pub outcome: OutcomeSummary,
    pub devices: Vec<EvidenceDevice>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompatibilityIssue {
    pub target_api: String,
    pub kind: IssueKind,
    pub scope: IssueScope,
    /// Devices partitioned by outcome, groups ordered by outcome.
    pub evidence: Vec<EvidenceGroup>,
}

fn issue_kind<'a>(summaries: impl Iterator<Item = &'a OutcomeSummary>, taxonomy: &ErrorTaxonomy) -> IssueKind {
    let classes: BTreeSet<ErrorClass> = summaries
        .filter_map(|s| match s {
            OutcomeSummary::Fail(kind) => Some(classify_error(kind, taxonomy)),
            OutcomeSummary::Pass => None,
        })
        .collect();
    match (
        classes.contains(&ErrorClass::Signature),
        classes.contains(&ErrorClass::Semantics),
    ) {
        (true, false) => IssueKind::Signature,
        (false, true) => IssueKind::Semantics,
        _ => IssueKind::Mixed,
    }
}

/// Scope of a divergence: model-specific if two devices of one brand at one
/// API level disagree, else vendor-specific if two brands at one level
/// disagree, else version-specific.
pub fn scope_of<'a>(
    cells: impl IntoIterator<Item = (&'a DeviceProfile, &'a OutcomeSummary)>,
    taxonomy: &ErrorTaxonomy,
) -> IssueScope {
    let cells: Vec<_> = cells.into_iter().collect();
    let mut vendor = false;
    for (i, (a, oa)) in cells.iter().enumerate() {
        for (b, ob) in &cells[i + 1..] {
            if a.api_level != b.api_level || oa == ob {
                continue;
            }
            if taxonomy.brand(&a.brand) == taxonomy.brand(&b.brand) {
                return IssueScope::ModelSpecific;
            }
            vendor = true;
        }
    }
    if vendor {
        IssueScope::VendorSpecific
    } else {
        IssueScope::VersionSpecific
    }
}

/// Scope an issue against registered profiles. Devices missing from
/// `profiles` are ignored.
pub fn scope_issue(
    issue: &CompatibilityIssue,
    profiles: &HashMap<DeviceId, DeviceProfile>,
    taxonomy: &ErrorTaxonomy,
) -> IssueScope {
    let cells: Vec<(&DeviceProfile, &OutcomeSummary)> = issue
        .evidence
        .iter()
        .flat_map(|g| g.devices.iter().map(move |d| (d, &g.outcome)))
        .filter_map(|(d, o)| profiles.get(&d.device).map(|p| (p, o)))
        .collect();
    scope_of(cells, taxonomy)
}

pub fn detect_issues(matrix: &ResultMatrix, taxonomy: &ErrorTaxonomy) -> Vec<CompatibilityIssue> {
    let mut issues = Vec::new();
    for (api, cells) in &matrix.apis {
        let mut groups: BTreeMap<&OutcomeSummary, Vec<EvidenceDevice>> = BTreeMap::new();
        for (device, cell) in cells {
            groups.entry(&cell.summary).or_default().push(EvidenceDevice {
                device: device.clone(),
                brand: cell.profile.brand.clone(),
                model: cell.profile.model.clone(),
                api_level: cell.profile.api_level,
            });
        }
        if groups.len() < 2 {
            continue;
        }
        let kind = issue_kind(groups.keys().copied(), taxonomy);
        let scope = scope_of(cells.values().map(|c| (&c.profile, &c.summary)), taxonomy);
        issues.push(CompatibilityIssue {
            target_api: api.clone(),
            kind,
            scope,
            evidence: groups
                .into_iter()
                .map(|(outcome, devices)| EvidenceGroup {
                    outcome: outcome.clone(),
                    devices,
                })
                .collect(),
        });
    }
    issues
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub question_id: u8,
    pub rating: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SurveyError {
    #[error("no survey responses")]
    Empty,
    #[error("rating {rating} for question {question_id} outside 1-5")]
    Rating { question_id: u8, rating: u8 },
    #[error("question id {0} outside 1-6")]
    Question(u8),
}

/// Difference of two percentages over the same respondents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetScore {
    pub positive_pct: f64,
    pub negative_pct: f64,
}

impl NetScore {
    pub fn value(&self) -> f64 {
        self.positive_pct - self.negative_pct
    }

    /// Each share rounded to a whole percent before subtracting, the way the
    /// scores are conventionally reported (92% - 8% = 84%).
    pub fn whole_percent(&self) -> i64 {
        self.positive_pct.round() as i64 - self.negative_pct.round() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub question_id: u8,
    pub responses: usize,
    /// Customer effort: % rating 4-5 minus % rating 1-2.
    pub ces: NetScore,
    /// Customer satisfaction: % rating 4-5.
    pub css: f64,
    /// Net promoter: % rating 4-5 minus % rating 1-3.
    pub nps: NetScore,
}

impl QuestionScores {
    pub fn css_whole_percent(&self) -> i64 {
        self.css.round() as i64
    }
}

pub fn survey_scores(responses: &[SurveyResponse]) -> Result<Vec<QuestionScores>, SurveyError> {
    if responses.is_empty() {
        return Err(SurveyError::Empty);
    }
    let mut by_question: BTreeMap<u8, Vec<u8>> = BTreeMap::new();
    for r in responses {
        if !(1..=6).contains(&r.question_id) {
            return Err(SurveyError::Question(r.question_id));
        }
        if !(1..=5).contains(&r.rating) {
            return Err(SurveyError::Rating {
                question_id: r.question_id,
                rating: r.rating,
            });
        }
        by_question.entry(r.question_id).or_default().push(r.rating);
    }
    Ok(by_question
        .into_iter()
        .map(|(question_id, ratings)| {
            let n = ratings.len() as f64;
            let pct = |pred: fn(u8) -> bool| ratings.iter().filter(|r| pred(**r)).count() as f64 / n * 100.0;
            let high = pct(|r| r >= 4);
            QuestionScores {
                question_id,
                responses: ratings.len(),
                ces: NetScore {
                    positive_pct: high,
                    negative_pct: pct(|r| r <= 2),
                },
                css: high,
                nps: NetScore {
                    positive_pct: high,
                    negative_pct: pct(|r| r <= 3),
                },
            }
        })
        .collect())
}
