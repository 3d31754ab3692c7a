//! Device registration and specification clustering.
//!
//! Devices receive a counter-based id (`dev-000001`, ...) that carries nothing
//! from the profile. Clusters group devices sharing `(brand, model, api_level)`;
//! language and screen size are kept on the profile but never split clusters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

pub const MAX_API_LEVEL: u32 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error("brand must not be empty")]
    EmptyBrand,
    #[error("model must not be empty")]
    EmptyModel,
    #[error("api_level {0} outside [1, {MAX_API_LEVEL}]")]
    ApiLevel(u32),
    #[error("screen dimensions must be positive, got {0}x{1}")]
    Screen(u32, u32),
}

#[derive(Debug, Error)]
pub enum FleetError {
    #[error(transparent)]
    Read(#[from] JsonlError),
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: ProfileError,
    },
}

/// A device's specification as reported at registration.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub brand: String,
    pub model: String,
    pub api_level: u32,
    pub soc: String,
    /// BCP-47 tag, e.g. `en-AU`.
    pub language: String,
    pub screen_w: u32,
    pub screen_h: u32,
}

impl DeviceProfile {
    pub fn new(brand: &str, model: &str, api_level: u32, soc: &str, language: &str, screen: (u32, u32)) -> Self {
        Self {
            brand: brand.to_string(),
            model: model.to_string(),
            api_level,
            soc: soc.to_string(),
            language: language.to_string(),
            screen_w: screen.0,
            screen_h: screen.1,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.brand.trim().is_empty() {
            return Err(ProfileError::EmptyBrand);
        }
        if self.model.trim().is_empty() {
            return Err(ProfileError::EmptyModel);
        }
        if !(1..=MAX_API_LEVEL).contains(&self.api_level) {
            return Err(ProfileError::ApiLevel(self.api_level));
        }
        if self.screen_w == 0 || self.screen_h == 0 {
            return Err(ProfileError::Screen(self.screen_w, self.screen_h));
        }
        Ok(())
    }

    pub fn screen(&self) -> (u32, u32) {
        (self.screen_w, self.screen_h)
    }

    pub fn cluster_key(&self) -> ClusterKey {
        ClusterKey {
            brand: self.brand.clone(),
            model: self.model.clone(),
            api_level: self.api_level,
        }
    }
}

/// Anonymous per-registration identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(String);

impl DeviceId {
    fn from_counter(n: u64) -> Self {
        DeviceId(format!("dev-{n:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId(s.to_string())
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClusterKey {
    pub brand: String,
    pub model: String,
    pub api_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCluster {
    pub key: ClusterKey,
    /// Registration order.
    pub members: Vec<DeviceId>,
}

#[derive(Debug, Default)]
struct Inner {
    next: u64,
    order: Vec<DeviceId>,
    profiles: HashMap<DeviceId, DeviceProfile>,
}

/// Thread-safe device registry. Id assignment is serialized behind a mutex.
#[derive(Debug, Default)]
pub struct Registry {
    inner: Mutex<Inner>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_device(&self, profile: DeviceProfile) -> Result<DeviceId, ProfileError> {
        profile.validate()?;
        let mut inner = self.inner.lock().expect("registry lock poisoned");
        inner.next += 1;
        let id = DeviceId::from_counter(inner.next);
        inner.order.push(id.clone());
        inner.profiles.insert(id.clone(), profile);
        Ok(id)
    }

    pub fn profile(&self, id: &DeviceId) -> Option<DeviceProfile> {
        let inner = self.inner.lock().expect("registry lock poisoned");
        inner.profiles.get(id).cloned()
    }

    pub fn contains(&self, id: &DeviceId) -> bool {
        let inner = self.inner.lock().expect("registry lock poisoned");
        inner.profiles.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("registry lock poisoned").order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Consistent copy of all registrations in registration order.
    pub fn snapshot(&self) -> Vec<(DeviceId, DeviceProfile)> {
        let inner = self.inner.lock().expect("registry lock poisoned");
        inner
            .order
            .iter()
            .map(|id| (id.clone(), inner.profiles[id].clone()))
            .collect()
    }

    pub fn cluster_devices(&self) -> Vec<DeviceCluster> {
        cluster_devices(&self.snapshot())
    }
}

/// Groups devices by `(brand, model, api_level)`, ordered by key.
pub fn cluster_devices(devices: &[(DeviceId, DeviceProfile)]) -> Vec<DeviceCluster> {
    let mut groups: BTreeMap<ClusterKey, Vec<DeviceId>> = BTreeMap::new();
    for (id, profile) in devices {
        groups.entry(profile.cluster_key()).or_default().push(id.clone());
    }
    groups
        .into_iter()
        .map(|(key, members)| DeviceCluster { key, members })
        .collect()
}

/// Reads a fleet definition: one profile per JSON line.
pub fn load_fleet(path: &Path) -> Result<Vec<DeviceProfile>, FleetError> {
    let text = jsonl::read_to_string(path)?;
    parse_fleet(&text)
}

pub fn parse_fleet(text: &str) -> Result<Vec<DeviceProfile>, FleetError> {
    let rows: Vec<(usize, DeviceProfile)> = jsonl::parse_lines(text)?;
    rows.into_iter()
        .map(|(line, p)| {
            p.validate().map_err(|source| FleetError::Invalid { line, source })?;
            Ok(p)
        })
        .collect()
}
