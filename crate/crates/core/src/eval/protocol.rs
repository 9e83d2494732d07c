use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    average_metrics, evaluate_labels, policy_scaling_delta, ConfusionCounts, EvalConfig, EvalError, EvalReport,
    LooReport, PolicyMetrics,
};
use crate::collector::{Collector, CollectorConfig, LabeledExample};
use crate::dataset::Dataset;
use crate::embedding::Embedders;
use crate::gateway::BackendHandle;
use crate::judge::Judge;
use crate::policy::PolicyCatalog;
use crate::retrieval::RetrievalConfig;
use crate::store::{PrecedentDb, PvLabel, UtilizationStats};

/// Collection bookkeeping for one leave-one-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRun {
    pub attempted_by_policy: BTreeMap<String, usize>,
    pub stored_by_policy: BTreeMap<String, usize>,
    pub utilization: UtilizationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyScalingReport {
    /// Each policy judged on its own, counts pooled.
    pub single: EvalReport,
    /// All policies in scope at once.
    pub multi: EvalReport,
    pub delta: f64,
}

/// Builds precedent databases with the collector and scores the judge on
/// held-out examples. Every run uses a fresh in-memory database.
#[derive(Clone)]
pub struct Harness {
    backend: BackendHandle,
    embedders: Embedders,
    catalog: Arc<PolicyCatalog>,
    retrieval: RetrievalConfig,
    collector: CollectorConfig,
    parallelism: usize,
    seed: u64,
}

impl Harness {
    pub fn new(
        backend: BackendHandle,
        embedders: Embedders,
        catalog: Arc<PolicyCatalog>,
        retrieval: RetrievalConfig,
    ) -> Self {
        Self {
            backend,
            embedders,
            catalog,
            retrieval,
            collector: CollectorConfig::default(),
            parallelism: 4,
            seed: 0,
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_collector_config(mut self, cfg: CollectorConfig) -> Self {
        self.collector = cfg;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Collects `examples` into a new database.
    pub async fn build_db(&self, examples: &[LabeledExample]) -> Result<(PrecedentDb, UtilizationStats), EvalError> {
        let db = PrecedentDb::in_memory();
        let collector = Collector::new(self.backend.clone(), self.catalog.clone())
            .with_embedders(self.embedders.clone())
            .with_config(self.collector.clone());
        let batch = collector.collect_batch(examples, &db, self.parallelism).await;
        for o in batch.outcomes {
            o?;
        }
        Ok((db, batch.stats))
    }

    /// Judges `test_set` against `db` with `scope` as the fallback catalog.
    /// Failed judgments score as non-violating and are counted.
    pub async fn judge_and_evaluate(
        &self,
        db: &PrecedentDb,
        test_set: &[LabeledExample],
        scope: Arc<PolicyCatalog>,
    ) -> Result<EvalReport, EvalError> {
        let judge = Judge::new(self.backend.clone(), self.embedders.clone(), scope, self.retrieval);
        let images: Vec<_> = test_set.iter().map(|e| e.image.clone()).collect();
        let results = judge.judge_batch(&images, db, self.parallelism).await;
        let mut failures = 0;
        let labels: Vec<PvLabel> = results
            .into_iter()
            .map(|r| match r {
                Ok(v) => v.label,
                Err(e) => {
                    tracing::warn!(error = %e, "judgment failed");
                    failures += 1;
                    PvLabel::NonViolating
                }
            })
            .collect();
        let mut report = evaluate_labels(test_set, &labels)?;
        report.judge_failures = failures;
        Ok(report)
    }

    fn config(&self, n_shots: usize, policies: &[&str]) -> EvalConfig {
        EvalConfig {
            n_shots: Some(n_shots),
            policies_in_scope: policies.iter().map(|s| s.to_string()).collect(),
            retrieval_cfg: Some(self.retrieval),
            seed: Some(self.seed),
        }
    }

    fn shots(&self, dataset: &Dataset, policies: &[&str], n: usize) -> Result<Vec<LabeledExample>, EvalError> {
        let mut out = Vec::new();
        for p in policies {
            out.extend(dataset.sample_shots(p, n, self.seed)?);
        }
        Ok(out)
    }

    /// N-shot evaluation with `policies` in scope (all catalog policies when
    /// empty), scored on their test split.
    pub async fn run_main(&self, dataset: &Dataset, n_shots: usize, policies: &[&str]) -> Result<EvalReport, EvalError> {
        let all: Vec<&str> = self.catalog.ids().collect();
        let policies = if policies.is_empty() { &all[..] } else { policies };
        let train = self.shots(dataset, policies, n_shots)?;
        let (db, _) = self.build_db(&train).await?;
        let test = dataset.test_for(policies);
        let scope = Arc::new(self.catalog.restrict(policies));
        let mut report = self.judge_and_evaluate(&db, &test, scope).await?;
        report.config = self.config(n_shots, policies);
        Ok(report)
    }

    /// One run per policy with only that policy in scope versus one run with
    /// all of `policies`.
    pub async fn run_policy_scaling(
        &self,
        dataset: &Dataset,
        n_shots: usize,
        policies: &[&str],
    ) -> Result<PolicyScalingReport, EvalError> {
        let all: Vec<&str> = self.catalog.ids().collect();
        let policies = if policies.is_empty() { &all[..] } else { policies };
        let multi = self.run_main(dataset, n_shots, policies).await?;
        let mut per_policy = BTreeMap::new();
        let mut pooled = ConfusionCounts::default();
        let mut failures = 0;
        for p in policies {
            let r = self.run_main(dataset, n_shots, &[p]).await?;
            pooled.add(&r.overall.counts);
            failures += r.judge_failures;
            per_policy.extend(r.per_policy);
        }
        let single = EvalReport {
            config: self.config(n_shots, policies),
            per_policy,
            overall: PolicyMetrics::from_counts(pooled)?,
            judge_failures: failures,
        };
        let delta = policy_scaling_delta(&single, &multi);
        Ok(PolicyScalingReport { single, multi, delta })
    }

    /// For each catalog policy: collect `abundant_shots` of every other
    /// policy plus `heldout_shots` of it, then score on its test split only.
    pub async fn run_loo(
        &self,
        dataset: &Dataset,
        heldout_shots: usize,
        abundant_shots: usize,
    ) -> Result<LooReport, EvalError> {
        let policies: Vec<&str> = self.catalog.ids().collect();
        for p in &policies {
            dataset.sample_shots(p, abundant_shots.max(heldout_shots), self.seed)?;
        }
        let mut per_heldout = BTreeMap::new();
        let mut runs = BTreeMap::new();
        for &q in &policies {
            let mut train = Vec::new();
            for &p in &policies {
                let n = if p == q { heldout_shots } else { abundant_shots };
                train.extend(dataset.sample_shots(p, n, self.seed)?);
            }
            let (db, utilization) = self.build_db(&train).await?;
            let test = dataset.test_for(&[q]);
            let report = self.judge_and_evaluate(&db, &test, self.catalog.clone()).await?;
            per_heldout.insert(q.to_string(), report.overall);
            let mut attempted = BTreeMap::new();
            for e in &train {
                *attempted.entry(e.policy_id.clone()).or_insert(0) += 1;
            }
            let mut stored = BTreeMap::new();
            for p in db.records() {
                *stored.entry(p.policy_id.clone()).or_insert(0) += 1;
            }
            runs.insert(
                q.to_string(),
                LooRun {
                    attempted_by_policy: attempted,
                    stored_by_policy: stored,
                    utilization,
                },
            );
        }
        let entries: Vec<_> = per_heldout.values().map(PolicyMetrics::metrics).collect();
        let average = average_metrics(&entries);
        Ok(LooReport {
            per_heldout,
            average,
            runs,
        })
    }

    /// One independent database and report per shot count.
    pub async fn data_scaling_sweep(
        &self,
        dataset: &Dataset,
        shots: &[usize],
        policies: &[&str],
    ) -> Result<Vec<EvalReport>, EvalError> {
        let all: Vec<&str> = self.catalog.ids().collect();
        let policies = if policies.is_empty() { &all[..] } else { policies };
        if let Some(&max) = shots.iter().max() {
            for p in policies {
                dataset.sample_shots(p, max, self.seed)?;
            }
        }
        let mut out = Vec::with_capacity(shots.len());
        for &n in shots {
            out.push(self.run_main(dataset, n, policies).await?);
        }
        Ok(out)
    }
}
