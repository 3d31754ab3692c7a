#![allow(dead_code)]

use std::path::PathBuf;

use idlefleet_core::campaign::{CampaignInputs, CampaignPaths};
use idlefleet_core::Strategy;

pub const UNLOCKED: &str = "android.security.keystore.KeyGenParameterSpec.Builder#setUnlockedDeviceRequired";
pub const VALUE_AT: &str = "android.util.LongSparseArray#valueAt";
pub const FRAME_DELAY: &str = "android.animation.ValueAnimator#setFrameDelay";
pub const GET_IMEI: &str = "android.telephony.TelephonyManager#getImei";
pub const QUERY_SUMMARY: &str = "android.app.usage.NetworkStatsManager#querySummary";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn case_study_inputs() -> CampaignInputs {
    CampaignInputs::load(&CampaignPaths {
        fleet: fixture("device_table.jsonl"),
        tests: fixture("case_study_tests.jsonl"),
        oracle: Some(fixture("case_study_oracle.jsonl")),
        trace: None,
        taxonomy: None,
    })
    .expect("case-study fixtures load")
}

pub fn query_summary_inputs() -> CampaignInputs {
    CampaignInputs::load(&CampaignPaths {
        fleet: fixture("query_summary_fleet.jsonl"),
        tests: fixture("query_summary_tests.jsonl"),
        oracle: Some(fixture("query_summary_oracle.jsonl")),
        trace: None,
        taxonomy: None,
    })
    .expect("querySummary fixtures load")
}

/// Straight-line model of a runner walking its queue batch by batch.
/// Returns which queue positions ran.
pub fn reference_run(queue_len: usize, batch_size: usize, strategy: Strategy, crashes: &[bool]) -> Vec<bool> {
    let mut ran = vec![false; queue_len];
    let mut pos = 0;
    while pos < queue_len {
        let end = (pos + batch_size).min(queue_len);
        let mut crash_at = None;
        for p in pos..end {
            ran[p] = true;
            if crashes[p] {
                crash_at = Some(p);
                break;
            }
        }
        pos = match (crash_at, strategy) {
            (Some(p), Strategy::Rebuild) => p + 1,
            _ => end,
        };
    }
    ran
}

/// True iff two devices in some API column disagree.
pub fn all_pairs_disagree<T: PartialEq>(column: &[T]) -> bool {
    for i in 0..column.len() {
        for j in 0..column.len() {
            if column[i] != column[j] {
                return true;
            }
        }
    }
    false
}
