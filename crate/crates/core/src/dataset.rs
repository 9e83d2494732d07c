//! JSON-Lines labeled datasets: `{"image", "label", "policy_id", "split"?}`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{LabeledExample, Split};
use crate::image::ImageRef;
use crate::policy::PolicyCatalog;
use crate::store::PvLabel;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("dataset line {line}: unknown policy `{policy_id}`")]
    UnknownPolicy { line: usize, policy_id: String },
    #[error("policy `{policy}` needs {needed} examples but has {have}")]
    InsufficientData {
        policy: String,
        needed: usize,
        have: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLine {
    pub image: String,
    pub label: PvLabel,
    pub policy_id: String,
    #[serde(default)]
    pub split: Split,
}

impl From<DatasetLine> for LabeledExample {
    fn from(l: DatasetLine) -> Self {
        LabeledExample {
            image: ImageRef::new(l.image),
            label: l.label,
            policy_id: l.policy_id,
            split: l.split,
        }
    }
}

impl From<&LabeledExample> for DatasetLine {
    fn from(e: &LabeledExample) -> Self {
        DatasetLine {
            image: e.image.locator.clone(),
            label: e.label,
            policy_id: e.policy_id.clone(),
            split: e.split,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledExample>) -> Self {
        Self { examples }
    }

    /// Parses JSON Lines; blank lines are skipped. Relative image paths are
    /// resolved against `base` when given.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self, DatasetError> {
        let mut examples = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: DatasetLine = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                line: idx + 1,
                reason: e.to_string(),
            })?;
            rec.policy_id = crate::policy::normalize_id(&rec.policy_id);
            if let Some(base) = base {
                let p = Path::new(&rec.image);
                if !rec.image.contains("://") && p.is_relative() {
                    rec.image = base.join(p).to_string_lossy().into_owned();
                }
            }
            examples.push(rec.into());
        }
        Ok(Self { examples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(&DatasetLine::from(e)).expect("line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn validate(&self, catalog: &PolicyCatalog) -> Result<(), DatasetError> {
        for (idx, e) in self.examples.iter().enumerate() {
            if !catalog.contains(&e.policy_id) {
                return Err(DatasetError::UnknownPolicy {
                    line: idx + 1,
                    policy_id: e.policy_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn train_for<'a>(&'a self, policy: &'a str) -> impl Iterator<Item = &'a LabeledExample> {
        self.split(Split::Train).filter(move |e| e.policy_id == policy)
    }

    /// Test-split examples whose policy is in `policies`.
    pub fn test_for(&self, policies: &[&str]) -> Vec<LabeledExample> {
        self.split(Split::Test)
            .filter(|e| policies.contains(&e.policy_id.as_str()))
            .cloned()
            .collect()
    }

    /// The first `n` of a seeded permutation of `policy`'s training examples.
    /// Smaller `n` under the same seed gives a prefix of larger `n`.
    pub fn sample_shots(&self, policy: &str, n: usize, seed: u64) -> Result<Vec<LabeledExample>, DatasetError> {
        let mut pool: Vec<LabeledExample> = self.train_for(policy).cloned().collect();
        if pool.len() < n {
            return Err(DatasetError::InsufficientData {
                policy: policy.to_string(),
                needed: n,
                have: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ policy_salt(policy));
        pool.shuffle(&mut rng);
        pool.truncate(n);
        Ok(pool)
    }
}

fn policy_salt(policy: &str) -> u64 {
    // FNV-1a keeps per-policy streams independent but stable across runs.
    policy
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
