//! Offline synthetic data: image files tagged with a cluster, an embedder
//! that maps each cluster (and sub-mode) to its own direction, a simulated
//! VLM that answers from those tags, and scripted collection mocks.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::collector::{LabeledExample, Split};
use crate::dataset::Dataset;
use crate::embedding::{hashed_direction, EmbedInput, EmbedKind, Embedder, EmbedderError, Embedders, EmbeddingVector};
use crate::gateway::{BackendResponse, Conversation, GatewayError, ScriptStep, VlmBackend};
use crate::policy::{seed_unsafebench_catalog, PolicyCatalog};
use crate::store::PvLabel;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Policy ids taken from the seed catalog.
    pub policies: Vec<String>,
    pub train_per_cluster: usize,
    pub test_per_cluster: usize,
    /// Sub-modes per (policy, label) cluster. Images from different sub-modes
    /// of one cluster sit at cosine ~0.5, below the default threshold.
    pub submodes: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(policies: &[&str]) -> Self {
        Self {
            policies: policies.iter().map(|s| s.to_string()).collect(),
            train_per_cluster: 8,
            test_per_cluster: 10,
            submodes: 1,
            seed: 0,
        }
    }
}

pub struct SyntheticWorld {
    pub dir: PathBuf,
    pub catalog: PolicyCatalog,
    pub dataset: Dataset,
}

pub fn cluster_key(policy: &str, label: PvLabel) -> String {
    format!("{policy}/{}", label.as_str())
}

impl SyntheticWorld {
    /// Writes one small file per image under `dir`.
    pub fn generate(dir: impl AsRef<Path>, spec: &SyntheticSpec) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let ids: Vec<&str> = spec.policies.iter().map(String::as_str).collect();
        let catalog = seed_unsafebench_catalog().restrict(&ids);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let submodes = spec.submodes.max(1);
        let mut examples = Vec::new();
        for policy in &spec.policies {
            for label in [PvLabel::Violating, PvLabel::NonViolating] {
                let key = cluster_key(policy, label);
                let splits = [(Split::Train, spec.train_per_cluster), (Split::Test, spec.test_per_cluster)];
                for (split, n) in splits {
                    for i in 0..n {
                        let mode = match split {
                            Split::Train => i % submodes,
                            Split::Test => rng.random_range(0..submodes),
                        };
                        let split_tag = match split {
                            Split::Train => "train",
                            Split::Test => "test",
                        };
                        let name = format!("{policy}_{}_{split_tag}_{i}.img", label.as_str());
                        let path = dir.join(&name);
                        std::fs::write(&path, format!("synthetic cluster={key} mode={mode} idx={split_tag}{i}\n"))?;
                        examples.push(
                            LabeledExample::new(path.to_string_lossy(), label, policy.clone()).with_split(split),
                        );
                    }
                }
            }
        }
        Ok(Self {
            dir,
            catalog,
            dataset: Dataset::new(examples),
        })
    }

    pub fn embedders(&self, dims: usize) -> Embedders {
        Embedders::new(
            Arc::new(ClusterEmbedder::new(EmbedKind::Image, dims)),
            Arc::new(ClusterEmbedder::new(EmbedKind::Text, dims)),
        )
    }

    pub fn simulated_vlm(&self) -> SimulatedVlm {
        SimulatedVlm::new(self.catalog.clone())
    }
}

/// The `cluster=` and `mode=` tags found in image bytes or caption text.
fn tags(text: &str) -> Option<(String, String)> {
    let find = |prefix: &str| {
        text.split_whitespace()
            .find_map(|w| w.strip_prefix(prefix))
            .map(|v| v.trim_end_matches(['.', ',']).to_string())
    };
    Some((find("cluster=")?, find("mode=").unwrap_or_else(|| "0".into())))
}

/// Embeds tagged inputs as `centroid(cluster) + centroid(cluster, mode)`
/// plus a little per-item noise; untagged inputs get a hashed direction.
#[derive(Debug, Clone)]
pub struct ClusterEmbedder {
    kind: EmbedKind,
    dims: usize,
}

impl ClusterEmbedder {
    pub fn new(kind: EmbedKind, dims: usize) -> Self {
        Self { kind, dims }
    }

    pub fn vector_for(&self, bytes: &[u8]) -> EmbeddingVector {
        let text = String::from_utf8_lossy(bytes);
        let Some((cluster, mode)) = tags(&text) else {
            return hashed_direction(1, self.kind, bytes, self.dims);
        };
        let c = hashed_direction(2, self.kind, cluster.as_bytes(), self.dims);
        let m = hashed_direction(3, self.kind, format!("{cluster}#{mode}").as_bytes(), self.dims);
        let n = hashed_direction(4, self.kind, bytes, self.dims);
        let values = c
            .values()
            .iter()
            .zip(m.values())
            .zip(n.values())
            .map(|((a, b), e)| a + b + 0.05 * e)
            .collect();
        EmbeddingVector::normalized_from(values).expect("sum of directions is non-zero")
    }
}

#[async_trait]
impl Embedder for ClusterEmbedder {
    fn kind(&self) -> EmbedKind {
        self.kind
    }

    fn dims(&self) -> usize {
        self.dims
    }

    async fn embed(&self, inputs: &[EmbedInput]) -> Result<Vec<EmbeddingVector>, EmbedderError> {
        inputs
            .iter()
            .map(|i| {
                if i.kind() != self.kind {
                    return Err(EmbedderError::WrongKind { kind: self.kind });
                }
                Ok(self.vector_for(i.bytes()))
            })
            .collect()
    }
}

/// A model that reads the cluster tag from the image and answers
/// accordingly. Judgments are correct unless the image is listed as a
/// first-pass or persistent error. The catalog fallback prompt always gets NO.
#[derive(Clone)]
pub struct SimulatedVlm {
    catalog: PolicyCatalog,
    first_wrong: Arc<HashSet<String>>,
    always_wrong: Arc<HashSet<String>>,
}

impl SimulatedVlm {
    pub fn new(catalog: PolicyCatalog) -> Self {
        Self {
            catalog,
            first_wrong: Arc::default(),
            always_wrong: Arc::default(),
        }
    }

    /// Images whose first judgment is flipped (fixed by revision).
    pub fn with_first_wrong(mut self, locators: impl IntoIterator<Item = String>) -> Self {
        self.first_wrong = Arc::new(locators.into_iter().collect());
        self
    }

    /// Images whose judgments are always flipped.
    pub fn with_always_wrong(mut self, locators: impl IntoIterator<Item = String>) -> Self {
        self.always_wrong = Arc::new(locators.into_iter().collect());
        self
    }

    fn reply(&self, conv: &Conversation) -> Result<String, GatewayError> {
        let last = conv.last_user_text().unwrap_or_default();
        let image_text = conv
            .image_bytes()
            .map(|b| String::from_utf8_lossy(b).into_owned())
            .unwrap_or_default();
        let (cluster, mode) = tags(&image_text).unwrap_or_else(|| ("unknown/NON_PV".into(), "0".into()));
        let locator = conv.image().map(|i| i.locator.as_str()).unwrap_or_default();
        let truth_under = |policy_id: &str| cluster == cluster_key(policy_id, PvLabel::Violating);
        let answer = |yes: bool| if yes { "YES" } else { "NO" }.to_string();
        let policy_in_prompt = || {
            self.catalog
                .iter()
                .find(|p| last.contains(&format!("{}: {}", p.name, p.definition)))
                .map(|p| p.id.clone())
        };

        if last.contains("Generate a detailed description") {
            return Ok(format!("A synthetic scene tagged cluster={cluster} mode={mode}."));
        }
        if last.contains("Critique the provided caption") {
            return Ok("The caption may have overlooked details relevant to the policy.".into());
        }
        if last.contains("revise the caption") {
            let first = conv.assistant_replies().next().unwrap_or_default();
            return Ok(format!("Revised: {first}"));
        }
        if last.contains("Provide a concise rationale") {
            let judged = conv.assistant_replies().last().unwrap_or_default();
            return Ok(json!({"rationale": format!("The scene shows cluster={cluster}; judged {judged}.")}).to_string());
        }
        if last.contains("Does the image contains unsafe content related to") {
            let truth = policy_in_prompt().is_some_and(|p| truth_under(&p));
            let flip = self.first_wrong.contains(locator) || self.always_wrong.contains(locator);
            return Ok(answer(truth != flip));
        }
        if last.contains("Based on the caption, does the image") {
            let truth = policy_in_prompt().is_some_and(|p| truth_under(&p));
            return Ok(answer(truth != self.always_wrong.contains(locator)));
        }
        if last.contains("Based on the description") {
            let truth = match policy_in_prompt() {
                Some(p) => truth_under(&p),
                // No policy given: trust a rationale from the same cluster.
                None => {
                    last.contains(&format!("cluster={cluster};")) && cluster.ends_with(&format!("/{}", PvLabel::Violating.as_str()))
                }
            };
            return Ok(answer(truth));
        }
        if last.contains("Based on the above criteria") {
            return Ok("NO".into());
        }
        Err(GatewayError::NoMatchingStep(last.chars().take(80).collect()))
    }
}

#[async_trait]
impl VlmBackend for SimulatedVlm {
    fn id(&self) -> &str {
        "simulated"
    }

    async fn complete(&self, conv: &Conversation) -> Result<BackendResponse, GatewayError> {
        let start = Instant::now();
        let text = self.reply(conv)?;
        Ok(BackendResponse {
            text,
            latency_ms: start.elapsed().as_millis() as u64,
            backend_id: "simulated".into(),
            attempts: 1,
        })
    }
}

/// Terminal states of one collection run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScriptedOutcome {
    CorrectFirst,
    CorrectAfterRevise,
    WrongTwice,
}

pub const FIRST_CAPTION: &str = "A person stands in a dimly lit street.";
pub const REVISED_CAPTION: &str = "A person holds a knife toward another person in a dimly lit street.";
pub const FIRST_RATIONALE: &str = "The first caption supports this judgment.";
pub const REVISED_RATIONALE: &str = "The revised caption supports this judgment.";

/// Mock steps that drive the collector to `outcome` for an example labeled
/// `label`.
pub fn collection_script(outcome: ScriptedOutcome, label: PvLabel) -> Vec<ScriptStep> {
    let right = label.as_answer();
    let wrong = PvLabel::from_violating(!label.is_violating()).as_answer();
    let rationale = |r: &str| json!({"rationale": r}).to_string();
    let first = match outcome {
        ScriptedOutcome::CorrectFirst => right,
        _ => wrong,
    };
    let mut steps = vec![
        ScriptStep::new("Generate a detailed description", FIRST_CAPTION),
        ScriptStep::new("Does the image contains unsafe content related to", first),
        ScriptStep::new("Provide a concise rationale", rationale(FIRST_RATIONALE)),
    ];
    if outcome != ScriptedOutcome::CorrectFirst {
        let second = if outcome == ScriptedOutcome::CorrectAfterRevise { right } else { wrong };
        steps.extend([
            ScriptStep::new("Critique the provided caption", "The caption missed the knife."),
            ScriptStep::new("revise the caption", REVISED_CAPTION),
            ScriptStep::new("Based on the caption, does the image", second),
            ScriptStep::new("Provide a concise rationale", rationale(REVISED_RATIONALE)),
        ]);
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    #[test]
    fn clusters_and_modes_separate() {
        let e = ClusterEmbedder::new(EmbedKind::Image, 128);
        let v = |s: &str| e.vector_for(s.as_bytes());
        let a = v("synthetic cluster=hate/PV mode=0 idx=1");
        let same = v("synthetic cluster=hate/PV mode=0 idx=2");
        let other_mode = v("synthetic cluster=hate/PV mode=1 idx=3");
        let other = v("synthetic cluster=hate/NON_PV mode=0 idx=1");
        assert!(cosine_similarity(&a, &same).unwrap() > 0.95);
        assert!(cosine_similarity(&a, &other_mode).unwrap() < 0.8);
        assert!(cosine_similarity(&a, &other).unwrap() < 0.5);
    }

    #[test]
    fn caption_tags_parse() {
        assert_eq!(
            tags("A synthetic scene tagged cluster=hate/PV mode=3."),
            Some(("hate/PV".into(), "3".into()))
        );
        assert_eq!(tags("nothing here"), None);
    }

    #[test]
    fn scripts_have_expected_length() {
        assert_eq!(collection_script(ScriptedOutcome::CorrectFirst, PvLabel::Violating).len(), 3);
        assert_eq!(collection_script(ScriptedOutcome::WrongTwice, PvLabel::NonViolating).len(), 7);
    }
}
