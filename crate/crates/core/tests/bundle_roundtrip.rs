use idlefleet_core::bundler::{apply_patch, diff, BundlePatch, TestBundle};
use idlefleet_core::testbank::{synthetic, TestSource};
use idlefleet_core::TestCase;
use proptest::prelude::*;

fn source() -> impl Strategy<Value = TestSource> {
    prop_oneof![
        Just(TestSource::Aosp),
        Just(TestSource::Generated),
        Just(TestSource::Custom)
    ]
}

fn case() -> impl Strategy<Value = TestCase> {
    (0u32..60, 0u32..12, source(), 1u32..20).prop_map(|(id, api, src, len)| {
        TestCase::with_standard_lifecycle(&format!("t{id:03}"), &format!("pkg.Api{api}#call"), src, len)
    })
}

fn cases() -> impl Strategy<Value = Vec<TestCase>> {
    proptest::collection::vec(case(), 0..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn diff_then_apply_reproduces_target(a in cases(), b in cases(), version in 0u64..1000) {
        let base = TestBundle::new(version, a);
        let target = TestBundle::new(version + 1, b);
        let patch = diff(&base, &target).unwrap();
        let rebuilt = apply_patch(&base, &patch).unwrap();
        prop_assert_eq!(&rebuilt, &target);
        prop_assert_eq!(rebuilt.checksum, target.checksum);
        prop_assert!(rebuilt.verify());
    }

    #[test]
    fn full_snapshot_rebuilds_from_empty(b in cases(), version in 1u64..1000) {
        let target = TestBundle::new(version, b);
        let patch = BundlePatch::full(&target);
        prop_assert!(patch.is_full_snapshot());
        let rebuilt = apply_patch(&TestBundle::empty_at(version - 1), &patch).unwrap();
        prop_assert_eq!(rebuilt, target);
    }

    #[test]
    fn patch_rejected_on_wrong_base(a in cases(), b in cases(), c in cases()) {
        let base = TestBundle::new(3, a);
        let other = TestBundle::new(3, c);
        prop_assume!(base.checksum != other.checksum);
        let patch = diff(&base, &TestBundle::new(4, b)).unwrap();
        prop_assert!(apply_patch(&other, &patch).is_err());
    }
}

#[test]
fn single_case_patch_is_small() {
    let cases = synthetic(5000);
    let base = TestBundle::new(1, cases.clone());
    let mut changed = cases;
    changed[2500].invocation_length += 1;
    let target = TestBundle::new(2, changed);
    let patch = diff(&base, &target).unwrap();
    assert_eq!(patch.updated.len(), 1);
    let patch_bytes = patch.canonical_bytes().len();
    let full_bytes = target.canonical_bytes().len();
    assert!(
        (patch_bytes as f64) < 0.05 * full_bytes as f64,
        "{patch_bytes} vs {full_bytes}"
    );
    assert_eq!(apply_patch(&base, &patch).unwrap(), target);
}
