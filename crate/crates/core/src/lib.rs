//! Idle-time crowdsourced unit testing over a simulated Android device fleet.
//!
//! The crate is organised the way a campaign flows:
//!
//! - [`registry`]: devices join, receive anonymous ids and are grouped into
//!   specification clusters.
//! - [`testbank`]: test-case ingestion and per-API deduplication.
//! - [`scheduler`]: per-cluster allocation and batch dispatch under the
//!   discard / rebuild crash strategies.
//! - [`bundler`]: incremental test bundle patches with content checksums.
//! - [`client_sim`]: the simulated device (idle gating, lifecycle execution,
//!   outcome oracle, session loop).
//! - [`transport`]: wire protocol and the dispatch server.
//! - [`analyzer`]: result matrices, compatibility issue detection and scoping,
//!   survey scores.
//! - [`campaign`]: end-to-end orchestration, strategy comparison and reports.

pub mod analyzer;
pub mod bundler;
pub mod campaign;
pub mod client_sim;
pub mod jsonl;
pub mod registry;
pub mod scheduler;
pub mod testbank;
pub mod transport;

pub use analyzer::{CompatibilityIssue, ErrorTaxonomy, IssueKind, IssueScope, ResultMatrix};
pub use bundler::{BundlePatch, TestBundle};
pub use campaign::{CampaignConfig, CampaignReport};
pub use client_sim::{DeviceState, ExecutionResult, OutcomeOracle};
pub use registry::{DeviceCluster, DeviceId, DeviceProfile, Registry};
pub use scheduler::{Assignment, CrashReport, DispatchCursor, Strategy};
pub use testbank::{LifecycleStep, Phase, TestBank, TestCase};
pub use transport::{DispatchServer, Message};
