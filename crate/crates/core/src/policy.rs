//! User-defined responsible-AI policies.
//!
//! A [`PolicyCatalog`] is an ordered, immutable set of [`Policy`] values.
//! Registration returns a new catalog so readers holding the old one are
//! never affected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seed definitions for the eleven UnsafeBench categories.
pub const UNSAFEBENCH_SEED_JSON: &str = include_str!("../data/unsafebench_policies.json");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy id `{0}` is already registered")]
    DuplicatePolicyId(String),
    #[error("policy `{0}` has an empty definition")]
    EmptyDefinition(String),
    #[error("policy id must not be empty")]
    EmptyId,
    #[error("policy catalog could not be read: {0}")]
    Io(String),
    #[error("policy catalog is not valid JSON: {0}")]
    Parse(String),
}

/// A named filtering rule with a prose definition that is interpolated
/// verbatim into prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub name: String,
    pub definition: String,
}

impl Policy {
    /// Builds a policy, lower-casing and trimming the id.
    pub fn new(
        id: impl AsRef<str>,
        name: impl Into<String>,
        definition: impl Into<String>,
    ) -> Result<Self, PolicyError> {
        let policy = Self {
            id: normalize_id(id.as_ref()),
            name: name.into(),
            definition: definition.into(),
        };
        policy.validate()?;
        Ok(policy)
    }

    fn validate(&self) -> Result<(), PolicyError> {
        if self.id.is_empty() {
            return Err(PolicyError::EmptyId);
        }
        if self.definition.trim().is_empty() {
            return Err(PolicyError::EmptyDefinition(self.id.clone()));
        }
        Ok(())
    }
}

pub fn normalize_id(id: &str) -> String {
    id.trim().to_lowercase()
}

/// Ordered collection of policies; iteration follows registration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyCatalog {
    policies: Vec<Policy>,
}

impl PolicyCatalog {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Returns a new catalog with `policy` appended.
    pub fn register(&self, mut policy: Policy) -> Result<Self, PolicyError> {
        policy.id = normalize_id(&policy.id);
        policy.validate()?;
        if self.get(&policy.id).is_some() {
            return Err(PolicyError::DuplicatePolicyId(policy.id));
        }
        let mut policies = self.policies.clone();
        policies.push(policy);
        Ok(Self { policies })
    }

    pub fn from_policies(
        policies: impl IntoIterator<Item = Policy>,
    ) -> Result<Self, PolicyError> {
        policies
            .into_iter()
            .try_fold(Self::empty(), |catalog, p| catalog.register(p))
    }

    pub fn from_json(json: &str) -> Result<Self, PolicyError> {
        let raw: Vec<Policy> =
            serde_json::from_str(json).map_err(|e| PolicyError::Parse(e.to_string()))?;
        Self::from_policies(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PolicyError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.policies).expect("policies serialize")
    }

    pub fn get(&self, id: &str) -> Option<&Policy> {
        let id = normalize_id(id);
        self.policies.iter().find(|p| p.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Policy> {
        self.policies.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.policies.iter().map(|p| p.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// Sub-catalog restricted to `ids`, keeping this catalog's order.
    pub fn restrict(&self, ids: &[&str]) -> Self {
        let wanted: Vec<String> = ids.iter().map(|id| normalize_id(id)).collect();
        Self {
            policies: self
                .policies
                .iter()
                .filter(|p| wanted.contains(&p.id))
                .cloned()
                .collect(),
        }
    }
}

/// The eleven UnsafeBench policies in their published order.
pub fn seed_unsafebench_catalog() -> PolicyCatalog {
    PolicyCatalog::from_json(UNSAFEBENCH_SEED_JSON).expect("bundled seed catalog is valid")
}
