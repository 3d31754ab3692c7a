//! Versioned test bundles and incremental patches between them.
//!
//! A bundle's checksum is FNV-1a 64 over the canonical serialization of its
//! cases: compact JSON with lexicographically sorted keys. The version is not
//! part of the hashed content, so an empty patch keeps the checksum.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::testbank::TestCase;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |hash, b| (hash ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Compact JSON with sorted object keys.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // `Value` objects are BTreeMap-backed, which sorts keys on the way out.
    let value = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&value).expect("value to string")
}

/// Content checksum, carried on the wire as 16 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub u64);

impl Serialize for Checksum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:016x}", self.0))
    }
}

impl<'de> Deserialize<'de> for Checksum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() != 16 {
            return Err(serde::de::Error::custom("checksum must be 16 hex digits"));
        }
        u64::from_str_radix(&s, 16)
            .map(Checksum)
            .map_err(serde::de::Error::custom)
    }
}

fn cases_checksum(cases: &BTreeMap<String, TestCase>) -> Checksum {
    Checksum(fnv1a64(canonical_json(cases).as_bytes()))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("patch must advance exactly one version (base {base}, target {target})")]
    VersionGap { base: u64, target: u64 },
    #[error("base checksum mismatch: bundle {actual:?}, patch expects {expected:?}")]
    BaseChecksum { expected: Checksum, actual: Checksum },
    #[error("bundle version {actual} does not match patch base {expected}")]
    BaseVersion { expected: u64, actual: u64 },
    #[error("corrupt patch: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestBundle {
    pub version: u64,
    pub cases: BTreeMap<String, TestCase>,
    pub checksum: Checksum,
}

impl TestBundle {
    pub fn new(version: u64, cases: impl IntoIterator<Item = TestCase>) -> Self {
        let cases: BTreeMap<String, TestCase> = cases.into_iter().map(|c| (c.id.clone(), c)).collect();
        let checksum = cases_checksum(&cases);
        Self {
            version,
            cases,
            checksum,
        }
    }

    pub fn empty() -> Self {
        Self::empty_at(0)
    }

    /// An empty bundle at an arbitrary version; the base of full snapshots.
    pub fn empty_at(version: u64) -> Self {
        Self::new(version, std::iter::empty())
    }

    pub fn empty_checksum() -> Checksum {
        cases_checksum(&BTreeMap::new())
    }

    pub fn verify(&self) -> bool {
        cases_checksum(&self.cases) == self.checksum
    }

    pub fn get(&self, id: &str) -> Option<&TestCase> {
        self.cases.get(id)
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self).into_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundlePatch {
    pub base_version: u64,
    pub target_version: u64,
    pub added: Vec<TestCase>,
    pub updated: Vec<TestCase>,
    pub removed: Vec<String>,
    pub base_checksum: Checksum,
    pub target_checksum: Checksum,
}

impl BundlePatch {
    /// A patch that rebuilds `target` from an empty bundle at the previous
    /// version. Clients that cannot apply an incremental patch fall back to it.
    pub fn full(target: &TestBundle) -> Self {
        Self {
            base_version: target.version.saturating_sub(1),
            target_version: target.version,
            added: target.cases.values().cloned().collect(),
            updated: Vec::new(),
            removed: Vec::new(),
            base_checksum: TestBundle::empty_checksum(),
            target_checksum: target.checksum,
        }
    }

    pub fn is_full_snapshot(&self) -> bool {
        self.base_checksum == TestBundle::empty_checksum() && self.updated.is_empty() && self.removed.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.updated.is_empty() && self.removed.is_empty()
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(self).into_bytes()
    }
}

pub fn diff(base: &TestBundle, target: &TestBundle) -> Result<BundlePatch, BundleError> {
    if target.version != base.version + 1 {
        return Err(BundleError::VersionGap {
            base: base.version,
            target: target.version,
        });
    }
    let mut added = Vec::new();
    let mut updated = Vec::new();
    for (id, case) in &target.cases {
        match base.cases.get(id) {
            None => added.push(case.clone()),
            Some(old) if canonical_json(old) != canonical_json(case) => updated.push(case.clone()),
            Some(_) => {}
        }
    }
    let removed = base
        .cases
        .keys()
        .filter(|id| !target.cases.contains_key(*id))
        .cloned()
        .collect();
    Ok(BundlePatch {
        base_version: base.version,
        target_version: target.version,
        added,
        updated,
        removed,
        base_checksum: base.checksum,
        target_checksum: target.checksum,
    })
}

pub fn apply_patch(base: &TestBundle, patch: &BundlePatch) -> Result<TestBundle, BundleError> {
    if patch.target_version != patch.base_version + 1 {
        return Err(BundleError::VersionGap {
            base: patch.base_version,
            target: patch.target_version,
        });
    }
    if base.checksum != patch.base_checksum {
        return Err(BundleError::BaseChecksum {
            expected: patch.base_checksum,
            actual: base.checksum,
        });
    }
    if base.version != patch.base_version {
        return Err(BundleError::BaseVersion {
            expected: patch.base_version,
            actual: base.version,
        });
    }
    let mut touched = BTreeSet::new();
    for id in patch
        .added
        .iter()
        .map(|c| &c.id)
        .chain(patch.updated.iter().map(|c| &c.id))
        .chain(patch.removed.iter())
    {
        if !touched.insert(id.as_str()) {
            return Err(BundleError::Corrupt(format!(
                "{id} appears in more than one change set"
            )));
        }
    }
    let mut cases = base.cases.clone();
    for id in &patch.removed {
        if cases.remove(id).is_none() {
            return Err(BundleError::Corrupt(format!("removed id {id} absent from base")));
        }
    }
    for case in &patch.updated {
        match cases.get_mut(&case.id) {
            Some(slot) => *slot = case.clone(),
            None => return Err(BundleError::Corrupt(format!("updated id {} absent from base", case.id))),
        }
    }
    for case in &patch.added {
        if cases.insert(case.id.clone(), case.clone()).is_some() {
            return Err(BundleError::Corrupt(format!("added id {} already in base", case.id)));
        }
    }
    let result = TestBundle {
        version: patch.target_version,
        checksum: cases_checksum(&cases),
        cases,
    };
    if result.checksum != patch.target_checksum {
        return Err(BundleError::Corrupt(format!(
            "result checksum {:016x} does not match target {:016x}",
            result.checksum.0, patch.target_checksum.0
        )));
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbank::{synthetic, TestSource};

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn canonical_json_sorts_keys_without_whitespace() {
        let case = TestCase::with_standard_lifecycle("t", "api", TestSource::Custom, 2);
        let s = canonical_json(&case);
        assert!(s.starts_with("{\"id\":\"t\",\"invocation_length\":2,\"lifecycle\":[{\"phase\":\"BEFORE_CLASS\""));
        assert!(!s.contains(' '));
        assert_eq!(canonical_json(&BTreeMap::<String, TestCase>::new()), "{}");
    }

    #[test]
    fn identical_bundles_give_empty_patch() {
        let a = TestBundle::new(3, synthetic(5));
        let b = TestBundle::new(4, synthetic(5));
        let p = diff(&a, &b).unwrap();
        assert!(p.is_empty());
        assert_eq!(apply_patch(&a, &p).unwrap(), b);
    }

    #[test]
    fn from_empty_adds_everything() {
        let base = TestBundle::empty();
        let tc = TestCase::with_standard_lifecycle("tc-1", "api", TestSource::Aosp, 1);
        let target = TestBundle::new(1, vec![tc.clone()]);
        let p = diff(&base, &target).unwrap();
        assert_eq!(p.added, vec![tc]);
        assert!(p.updated.is_empty() && p.removed.is_empty());
    }

    #[test]
    fn version_gap_rejected() {
        let a = TestBundle::empty();
        let b = TestBundle::empty_at(2);
        assert_eq!(diff(&a, &b), Err(BundleError::VersionGap { base: 0, target: 2 }));
    }

    #[test]
    fn empty_patch_bumps_version_only() {
        let b = TestBundle::new(7, synthetic(3));
        let p = BundlePatch {
            base_version: 7,
            target_version: 8,
            added: vec![],
            updated: vec![],
            removed: vec![],
            base_checksum: b.checksum,
            target_checksum: b.checksum,
        };
        let out = apply_patch(&b, &p).unwrap();
        assert_eq!(out.version, 8);
        assert_eq!(out.cases, b.cases);
        assert_eq!(out.checksum, b.checksum);
    }

    #[test]
    fn wrong_base_checksum_rejected() {
        let b = TestBundle::new(1, synthetic(3));
        let t = TestBundle::new(2, synthetic(4));
        let mut p = diff(&b, &t).unwrap();
        p.base_checksum = Checksum(p.base_checksum.0 ^ 1);
        assert!(matches!(apply_patch(&b, &p), Err(BundleError::BaseChecksum { .. })));
    }

    #[test]
    fn removing_absent_id_is_corruption() {
        let b = TestBundle::new(1, synthetic(3));
        let mut p = diff(&b, &TestBundle::new(2, synthetic(3))).unwrap();
        p.removed.push("ghost".into());
        assert!(matches!(apply_patch(&b, &p), Err(BundleError::Corrupt(_))));
    }

    #[test]
    fn full_snapshot_rebuilds_from_empty() {
        let t = TestBundle::new(5, synthetic(20));
        let p = BundlePatch::full(&t);
        assert!(p.is_full_snapshot());
        let out = apply_patch(&TestBundle::empty_at(4), &p).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn checksum_serializes_as_hex() {
        let s = serde_json::to_string(&Checksum(0xab)).unwrap();
        assert_eq!(s, "\"00000000000000ab\"");
        let back: Checksum = serde_json::from_str(&s).unwrap();
        assert_eq!(back, Checksum(0xab));
        assert!(serde_json::from_str::<Checksum>("\"zz\"").is_err());
    }

    #[test]
    fn updated_only_when_content_differs() {
        let mut cases = synthetic(4);
        let base = TestBundle::new(1, cases.clone());
        cases[2].invocation_length += 1;
        let target = TestBundle::new(2, cases);
        let p = diff(&base, &target).unwrap();
        assert_eq!(p.updated.len(), 1);
        assert_eq!(p.updated[0].id, "tc-00002");
    }
}
