//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use idlefleet_core::analyzer::{detect_issues, survey_scores, OutcomeSummary, SurveyResponse};
use idlefleet_core::bundler::{apply_patch, diff, TestBundle};
use idlefleet_core::campaign::{compare_strategies, run_campaign, CrashModel};
use idlefleet_core::client_sim::is_suitable_time;
use idlefleet_core::jsonl;
use idlefleet_core::scheduler::{replay, Coverage, CrashReport, Dispatch, DispatchCursor};
use idlefleet_core::testbank::{synthetic, TestSource};
use idlefleet_core::{
    CampaignConfig, DeviceId, DeviceProfile, DeviceState, ErrorTaxonomy, IssueKind, IssueScope, ResultMatrix, Strategy,
    TestCase,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, Duration, fn() -> Outcome);

fn check(cond: bool, detail: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail.into())
    }
}

fn batch_arithmetic() -> Outcome {
    let queue: Vec<String> = (1..=5401).map(|i| format!("test-{i}")).collect();
    let next_after_crash = |strategy| -> Result<Vec<String>, String> {
        let mut cursor = DispatchCursor::new("dev".into(), queue.len(), strategy, 1000).map_err(|e| e.to_string())?;
        let Dispatch::Batch(first) = cursor.next_batch(None).map_err(|e| e.to_string())? else {
            return Err("no first batch".into());
        };
        let crash = CrashReport {
            batch_index: first.index,
            crashed_at: 9,
        };
        match cursor.next_batch(Some(crash)).map_err(|e| e.to_string())? {
            Dispatch::Batch(next) => Ok(next.test_ids(&queue)),
            Dispatch::Done => Err("done after first batch".into()),
        }
    };
    let rebuild = next_after_crash(Strategy::Rebuild)?;
    let discard = next_after_crash(Strategy::Discard)?;
    let span = |a: usize, b: usize| (a..=b).map(|i| format!("test-{i}")).collect::<Vec<_>>();
    check(
        rebuild == span(11, 1010),
        format!("rebuild next batch {}..{}", rebuild[0], rebuild[rebuild.len() - 1]),
    )?;
    check(
        discard == span(1001, 2000),
        format!("discard next batch {}..{}", discard[0], discard[discard.len() - 1]),
    )?;
    Ok("rebuild -> tests 11-1010, discard -> tests 1001-2000".into())
}

fn strategy_dominance() -> Outcome {
    let mut violations = 0;
    let mut pairs = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.gen_range(0.0..0.01);
        let n = 5401;
        let crashes: Vec<bool> = (0..n).map(|_| rng.gen_bool(p)).collect();
        for b in [100, 500, 1000] {
            let d = replay(n, b, Strategy::Discard, |i| crashes[i]).map_err(|e| e.to_string())?;
            let r = replay(n, b, Strategy::Rebuild, |i| crashes[i]).map_err(|e| e.to_string())?;
            pairs += 1;
            if d.executed.iter().zip(&r.executed).any(|(d, r)| *d && !*r) {
                violations += 1;
            }
        }
    }
    check(violations == 0, format!("{violations} violations"))?;
    Ok(format!("{pairs} paired traces, 0 violations"))
}

fn coverage_direction() -> Outcome {
    let model = CrashModel::Bernoulli {
        probability: 0.0015,
        runs: 50,
        seed: 2021,
    };
    let t = compare_strategies(5401, &model, &[100, 500, 1000], 1).map_err(|e| e.to_string())?;
    let cov = |s, b| t.row(s, b).map(|r| r.coverage_pct).unwrap_or(f64::NAN);
    let d: Vec<f64> = [100, 500, 1000].iter().map(|b| cov(Strategy::Discard, *b)).collect();
    let r: Vec<f64> = [100, 500, 1000].iter().map(|b| cov(Strategy::Rebuild, *b)).collect();
    check(
        d[0] > d[1] && d[1] > d[2],
        format!("discard not strictly ordered: {d:?}"),
    )?;
    check(
        r.iter().zip(&d).all(|(r, d)| r >= d),
        format!("rebuild below discard: {r:?} vs {d:?}"),
    )?;
    Ok(format!(
        "discard {:.1}% > {:.1}% > {:.1}%, rebuild {:.1}% / {:.1}% / {:.1}%",
        d[0], d[1], d[2], r[0], r[1], r[2]
    ))
}

fn coverage_arithmetic() -> Outcome {
    let pct = Coverage::from_counts(5008, 5401).percent();
    check((pct - 92.7).abs() <= 0.05, format!("{pct}"))?;
    Ok(format!("5008/5401 = {pct:.3}%"))
}

fn case_study_equivalence() -> Outcome {
    let run = run_campaign(&CampaignConfig::default(), &case_study_inputs()).map_err(|e| e.to_string())?;
    let got: BTreeSet<(String, IssueKind, IssueScope)> = run
        .report
        .issues
        .iter()
        .map(|i| (i.target_api.clone(), i.kind, i.scope))
        .collect();
    let want: BTreeSet<(String, IssueKind, IssueScope)> = [
        (UNLOCKED, IssueKind::Signature, IssueScope::VersionSpecific),
        (VALUE_AT, IssueKind::Semantics, IssueScope::VersionSpecific),
        (FRAME_DELAY, IssueKind::Semantics, IssueScope::VendorSpecific),
        (GET_IMEI, IssueKind::Semantics, IssueScope::ModelSpecific),
    ]
    .into_iter()
    .map(|(a, k, s)| (a.to_string(), k, s))
    .collect();
    check(got == want, format!("got {got:?}"))?;
    let qs = run_campaign(&CampaignConfig::default(), &query_summary_inputs()).map_err(|e| e.to_string())?;
    let kind = qs.report.issue(QUERY_SUMMARY).map(|i| i.kind);
    check(kind == Some(IssueKind::Mixed), format!("querySummary kind {kind:?}"))?;
    Ok("4 issues with expected (kind, scope); querySummary MIXED".into())
}

fn analyzer_brute_force() -> Outcome {
    let brands = ["Samsung", "Huawei", "Xiaomi", "Honor"];
    let outcomes = [
        OutcomeSummary::Pass,
        OutcomeSummary::Fail("NoSuchMethodError".into()),
        OutcomeSummary::Fail("SecurityException".into()),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut disagreements = 0;
    for _ in 0..500 {
        let n_dev = rng.gen_range(1..=8);
        let n_api = rng.gen_range(1..=20);
        let devices: Vec<DeviceProfile> = (0..n_dev)
            .map(|i| {
                let brand = brands[rng.gen_range(0..brands.len())];
                DeviceProfile::new(brand, &format!("M{i}"), rng.gen_range(27..31), "soc", "en", (720, 1280))
            })
            .collect();
        let mut cells = Vec::new();
        let mut expected = BTreeSet::new();
        for a in 0..n_api {
            let api = format!("api{a}");
            let skew = rng.gen_bool(0.5);
            let mut column = Vec::new();
            for (d, profile) in devices.iter().enumerate() {
                if rng.gen_bool(0.1) {
                    continue;
                }
                let o = if skew {
                    outcomes[rng.gen_range(0..outcomes.len())].clone()
                } else {
                    OutcomeSummary::Pass
                };
                column.push(o.clone());
                cells.push((
                    api.clone(),
                    DeviceId::from(format!("d{d}").as_str()),
                    profile.clone(),
                    o,
                ));
            }
            if all_pairs_disagree(&column) {
                expected.insert(api);
            }
        }
        let flagged: BTreeSet<String> = detect_issues(&ResultMatrix::from_cells(cells), &ErrorTaxonomy::default())
            .into_iter()
            .map(|i| i.target_api)
            .collect();
        if flagged != expected {
            disagreements += 1;
        }
    }
    check(disagreements == 0, format!("{disagreements} disagreements"))?;
    Ok("500 matrices, 0 disagreements".into())
}

fn patch_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let random_cases = |rng: &mut ChaCha8Rng| -> Vec<TestCase> {
        let n = rng.gen_range(0..40);
        (0..n)
            .map(|_| {
                TestCase::with_standard_lifecycle(
                    &format!("t{}", rng.gen_range(0..60)),
                    &format!("pkg.Api{}#m", rng.gen_range(0..10)),
                    TestSource::Aosp,
                    rng.gen_range(1..20),
                )
            })
            .collect()
    };
    for i in 0..1000u64 {
        let a = TestBundle::new(i, random_cases(&mut rng));
        let b = TestBundle::new(i + 1, random_cases(&mut rng));
        let patch = diff(&a, &b).map_err(|e| e.to_string())?;
        let out = apply_patch(&a, &patch).map_err(|e| e.to_string())?;
        check(out == b && out.checksum == b.checksum, format!("pair {i} differs"))?;
    }
    let cases = synthetic(5000);
    let base = TestBundle::new(1, cases.clone());
    let mut changed = cases;
    changed[1234].invocation_length += 3;
    let target = TestBundle::new(2, changed);
    let patch = diff(&base, &target).map_err(|e| e.to_string())?;
    let ratio = patch.canonical_bytes().len() as f64 / target.canonical_bytes().len() as f64;
    check(
        ratio < 0.05,
        format!("single-case patch is {:.2}% of bundle", ratio * 100.0),
    )?;
    Ok(format!(
        "1000 pairs roundtrip; single-case patch {:.3}% of bundle",
        ratio * 100.0
    ))
}

fn idle_truth_table() -> Outcome {
    let mut rows = 0;
    let mut suitable = 0;
    for screen_on in [false, true] {
        for idle_mode in [false, true] {
            for memory_usage in [0.24, 0.26] {
                for charging in [false, true] {
                    for battery_level in [0.59, 0.61] {
                        let s = DeviceState {
                            screen_on,
                            idle_mode,
                            memory_usage,
                            battery_level,
                            charging,
                        };
                        let expected =
                            !screen_on && idle_mode && memory_usage < 0.25 && charging && battery_level > 0.60;
                        check(is_suitable_time(&s) == expected, format!("row {s:?}"))?;
                        rows += 1;
                        suitable += usize::from(expected);
                    }
                }
            }
        }
    }
    check(rows == 32 && suitable == 1, format!("{rows} rows, {suitable} suitable"))?;
    Ok("32 rows match, 1 suitable".into())
}

fn survey() -> Outcome {
    let responses: Vec<SurveyResponse> = jsonl::read_lines(&fixture("survey_responses.jsonl"))
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let scores = survey_scores(&responses).map_err(|e| e.to_string())?;
    let q = |id: u8| scores.iter().find(|s| s.question_id == id).ok_or(format!("no Q{id}"));
    check(q(1)?.responses == 12, "expected 12 responses per question")?;
    let ces = (q(1)?.ces.whole_percent(), q(2)?.ces.whole_percent());
    let css = (
        q(3)?.css_whole_percent(),
        q(4)?.css_whole_percent(),
        q(5)?.css_whole_percent(),
    );
    let nps = q(6)?.nps.whole_percent();
    check(ces == (92, 92), format!("CES {ces:?}"))?;
    check(css == (92, 92, 100), format!("CSS {css:?}"))?;
    check(nps == 84, format!("NPS {nps}"))?;
    Ok("CES 92%, CSS 92/92/100%, NPS 84%".into())
}

fn determinism() -> Outcome {
    let config = CampaignConfig {
        crash_probability: 0.005,
        seed: 99,
        batch_size: 50,
        ..CampaignConfig::default()
    };
    let mut inputs = case_study_inputs();
    inputs.tests.extend(synthetic(600));
    let a = run_campaign(&config, &inputs)
        .map_err(|e| e.to_string())?
        .report
        .to_json();
    let b = run_campaign(&config, &inputs)
        .map_err(|e| e.to_string())?
        .report
        .to_json();
    check(a == b, "report JSON differs between runs")?;
    Ok(format!("{} bytes, identical", a.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "batch arithmetic", Duration::from_secs(1), batch_arithmetic),
        (2, "strategy dominance", Duration::from_secs(10), strategy_dominance),
        (3, "coverage direction", Duration::from_secs(30), coverage_direction),
        (4, "coverage arithmetic", Duration::from_secs(1), coverage_arithmetic),
        (
            5,
            "case-study equivalence",
            Duration::from_secs(5),
            case_study_equivalence,
        ),
        (6, "analyzer brute force", Duration::from_secs(10), analyzer_brute_force),
        (7, "patch roundtrip", Duration::from_secs(60), patch_roundtrip),
        (8, "idle truth table", Duration::from_secs(1), idle_truth_table),
        (9, "survey scores", Duration::from_secs(1), survey),
        (10, "determinism", Duration::from_secs(60), determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let verdict = match (&result, elapsed <= limit) {
            (Ok(detail), true) => format!("PASS  [{n:>2}] {name}: {detail} ({elapsed:.2?})"),
            (Ok(detail), false) => format!("FAIL  [{n:>2}] {name}: {detail}; took {elapsed:.2?}, limit {limit:?}"),
            (Err(why), _) => format!("FAIL  [{n:>2}] {name}: {why} ({elapsed:.2?})"),
        };
        println!("{verdict}");
        if verdict.starts_with("FAIL") {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
