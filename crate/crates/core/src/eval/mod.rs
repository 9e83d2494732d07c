//! Classification metrics with policy-violating as the positive class, and
//! the experiment protocols built on them.

mod protocol;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::LabeledExample;
use crate::dataset::DatasetError;
use crate::judge::Verdict;
use crate::retrieval::RetrievalConfig;
use crate::store::PvLabel;

pub use protocol::{Harness, LooRun, PolicyScalingReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: all counts are zero")]
    EmptyEvaluation,
    #[error("{examples} examples but {verdicts} verdicts")]
    LengthMismatch { examples: usize, verdicts: usize },
    #[error("policy `{policy}` needs {needed} examples but has {have}")]
    InsufficientData {
        policy: String,
        needed: usize,
        have: usize,
    },
    #[error(transparent)]
    Dataset(DatasetError),
    #[error(transparent)]
    Collect(#[from] crate::collector::CollectError),
    #[error(transparent)]
    Storage(#[from] crate::store::StoreError),
}

impl From<DatasetError> for EvalError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::InsufficientData { policy, needed, have } => {
                EvalError::InsufficientData { policy, needed, have }
            }
            other => EvalError::Dataset(other),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, truth: PvLabel, predicted: PvLabel) {
        match (truth.is_violating(), predicted.is_violating()) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, F1 and accuracy. A zero denominator gives 0.0.
pub fn metrics(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    if c.total() == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(c.tp + c.tn, c.total()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub counts: ConfusionCounts,
}

impl PolicyMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Result<Self, EvalError> {
        let m = metrics(&counts)?;
        Ok(Self {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            accuracy: m.accuracy,
            counts,
        })
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
            accuracy: self.accuracy,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_shots: Option<usize>,
    pub policies_in_scope: Vec<String>,
    pub retrieval_cfg: Option<RetrievalConfig>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub per_policy: BTreeMap<String, PolicyMetrics>,
    pub overall: PolicyMetrics,
    /// Judgments that errored and were scored as non-violating.
    #[serde(default)]
    pub judge_failures: usize,
}

/// Buckets by each example's ground-truth policy. A prediction is positive
/// iff it says violating, whichever policy the judge named.
pub fn evaluate_labels(test_set: &[LabeledExample], predictions: &[PvLabel]) -> Result<EvalReport, EvalError> {
    if test_set.len() != predictions.len() {
        return Err(EvalError::LengthMismatch {
            examples: test_set.len(),
            verdicts: predictions.len(),
        });
    }
    let mut buckets: BTreeMap<String, ConfusionCounts> = BTreeMap::new();
    let mut overall = ConfusionCounts::default();
    for (ex, &pred) in test_set.iter().zip(predictions) {
        buckets.entry(ex.policy_id.clone()).or_default().record(ex.label, pred);
        overall.record(ex.label, pred);
    }
    let per_policy = buckets
        .into_iter()
        .map(|(k, c)| PolicyMetrics::from_counts(c).map(|m| (k, m)))
        .collect::<Result<_, _>>()?;
    Ok(EvalReport {
        config: EvalConfig::default(),
        per_policy,
        overall: PolicyMetrics::from_counts(overall)?,
        judge_failures: 0,
    })
}

pub fn evaluate(test_set: &[LabeledExample], verdicts: &[Verdict]) -> Result<EvalReport, EvalError> {
    let labels: Vec<PvLabel> = verdicts.iter().map(|v| v.label).collect();
    evaluate_labels(test_set, &labels)
}

/// F1 with every policy in scope minus F1 with a single policy in scope.
pub fn policy_scaling_delta(single: &EvalReport, multi: &EvalReport) -> f64 {
    multi.overall.f1 - single.overall.f1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub per_heldout: BTreeMap<String, PolicyMetrics>,
    pub average: Metrics,
    pub runs: BTreeMap<String, LooRun>,
}

/// Arithmetic mean of each metric field.
pub fn average_metrics<'a>(items: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
    let mut sum = Metrics::default();
    let mut n = 0usize;
    for m in items {
        sum.precision += m.precision;
        sum.recall += m.recall;
        sum.f1 += m.f1;
        sum.accuracy += m.accuracy;
        n += 1;
    }
    if n == 0 {
        return sum;
    }
    let n = n as f64;
    Metrics {
        precision: sum.precision / n,
        recall: sum.recall / n,
        f1: sum.f1 / n,
        accuracy: sum.accuracy / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect() {
        let m = metrics(&ConfusionCounts::new(5, 0, 0, 5)).unwrap();
        assert_eq!(m, Metrics { precision: 1.0, recall: 1.0, f1: 1.0, accuracy: 1.0 });
    }

    #[test]
    fn hand_case() {
        let m = metrics(&ConfusionCounts::new(3, 1, 2, 4)).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.accuracy, 0.7);
    }

    #[test]
    fn degenerate() {
        let m = metrics(&ConfusionCounts::new(0, 0, 3, 7)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.0, 0.0, 0.0, 0.7));
        assert!(matches!(metrics(&ConfusionCounts::default()), Err(EvalError::EmptyEvaluation)));
    }

    #[test]
    fn counts_serialize_with_fn_key() {
        let json = serde_json::to_value(ConfusionCounts::new(1, 2, 3, 4)).unwrap();
        assert_eq!(json, serde_json::json!({"tp": 1, "fp": 2, "fn": 3, "tn": 4}));
    }

    fn ex(policy: &str, label: PvLabel) -> LabeledExample {
        LabeledExample::new("x.png", label, policy)
    }

    #[test]
    fn buckets_by_ground_truth() {
        use PvLabel::*;
        let set = vec![
            ex("hate", Violating),
            ex("hate", NonViolating),
            ex("spam", Violating),
            ex("spam", NonViolating),
        ];
        let r = evaluate_labels(&set, &[Violating, NonViolating, Violating, NonViolating]).unwrap();
        assert_eq!(r.per_policy["hate"].f1, 1.0);
        assert_eq!(r.per_policy["spam"].f1, 1.0);
        assert_eq!(r.overall.f1, 1.0);
        assert!(matches!(
            evaluate_labels(&set, &[Violating]),
            Err(EvalError::LengthMismatch { examples: 4, verdicts: 1 })
        ));
    }

    #[test]
    fn delta_examples() {
        let report = |f1: f64| {
            let mut r = evaluate_labels(&[ex("hate", PvLabel::Violating)], &[PvLabel::Violating]).unwrap();
            r.overall.f1 = f1;
            r
        };
        assert!((policy_scaling_delta(&report(0.654), &report(0.613)) - -0.041).abs() < 1e-12);
        assert!((policy_scaling_delta(&report(0.708), &report(0.622)) - -0.086).abs() < 1e-12);
        assert_eq!(policy_scaling_delta(&report(0.5), &report(0.5)), 0.0);
    }

    proptest! {
        #[test]
        fn accuracy_symmetric_in_tp_tn(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
            prop_assume!(tp + fp + fn_ + tn > 0);
            let a = metrics(&ConfusionCounts::new(tp, fp, fn_, tn)).unwrap();
            let b = metrics(&ConfusionCounts::new(tn, fp, fn_, tp)).unwrap();
            prop_assert_eq!(a.accuracy, b.accuracy);
        }

        #[test]
        fn shuffling_pairs_changes_nothing(
            pairs in proptest::collection::vec((0usize..3, any::<bool>(), any::<bool>()), 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let policies = ["hate", "spam", "sexual"];
            let build = |ps: &[(usize, bool, bool)]| {
                let set: Vec<_> = ps.iter().map(|(p, t, _)| ex(policies[*p], PvLabel::from_violating(*t))).collect();
                let preds: Vec<_> = ps.iter().map(|(_, _, v)| PvLabel::from_violating(*v)).collect();
                evaluate_labels(&set, &preds).unwrap()
            };
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(build(&pairs), build(&shuffled));
        }
    }
}
