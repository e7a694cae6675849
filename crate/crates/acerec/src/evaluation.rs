//! Ranking metrics under full-catalog scoring and the frequency-bucket
//! breakdown of test targets by their training-set popularity.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SplitDataset;
use crate::inference::{holistic_scores, rank_of_item, subspace_logprob_matrix, InferenceError};
use crate::model::{forward_sequence_values, ModelError, ModelParams};
use crate::opq::SemanticIdTable;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("invalid bucket spec: {0}")]
    BadBuckets(String),
    #[error("split has no users")]
    EmptySplit,
}

/// 1 if the single ground-truth target landed in the top K.
pub fn recall_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// Positional discount for the single target: 1/log2(rank+1) inside the
/// window, 0 outside.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    assert!(rank >= 1, "ranks are 1-based");
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Ordered, disjoint frequency intervals covering [0, ∞). `None` upper bound
/// means unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub ranges: Vec<(u64, Option<u64>)>,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec {
            ranges: vec![
                (0, Some(5)),
                (6, Some(10)),
                (11, Some(15)),
                (16, Some(20)),
                (21, None),
            ],
        }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.ranges.is_empty() {
            return Err(EvalError::BadBuckets("no ranges".into()));
        }
        if self.ranges[0].0 != 0 {
            return Err(EvalError::BadBuckets("first range must start at 0".into()));
        }
        for w in self.ranges.windows(2) {
            match w[0].1 {
                Some(hi) if w[1].0 == hi + 1 => {}
                Some(hi) => {
                    return Err(EvalError::BadBuckets(format!(
                        "range starting at {} does not follow bound {}",
                        w[1].0, hi
                    )))
                }
                None => {
                    return Err(EvalError::BadBuckets(
                        "unbounded range before the last".into(),
                    ))
                }
            }
        }
        if self.ranges.last().unwrap().1.is_some() {
            return Err(EvalError::BadBuckets(
                "last range must be unbounded to cover [0, inf)".into(),
            ));
        }
        Ok(())
    }

    /// Index of the bucket containing a count.
    pub fn bucket_of(&self, count: u64) -> usize {
        for (i, &(lo, hi)) in self.ranges.iter().enumerate() {
            if count >= lo && hi.map_or(true, |h| count <= h) {
                return i;
            }
        }
        unreachable!("validated spec covers all counts")
    }

    pub fn label(&self, i: usize) -> String {
        match self.ranges[i] {
            (lo, Some(hi)) => format!("[{lo},{hi}]"),
            (lo, None) => format!("[{lo},inf)"),
        }
    }
}

/// Train-set occurrence count per item index.
pub fn train_item_counts(split: &SplitDataset) -> Vec<u64> {
    let mut counts = vec![0u64; split.items.len()];
    for user in split.users.values() {
        for &item in &user.train {
            counts[item] += 1;
        }
    }
    counts
}

/// Targets grouped by the bucket of their train count, plus each bucket's
/// share of all targets in percent.
#[derive(Debug, Clone)]
pub struct BucketAssignment {
    pub members: Vec<Vec<usize>>,
    pub pct: Vec<f64>,
}

pub fn bucket_by_frequency(
    counts: &[u64],
    targets: &[usize],
    spec: &BucketSpec,
) -> Result<BucketAssignment, EvalError> {
    spec.validate()?;
    let mut members = vec![Vec::new(); spec.ranges.len()];
    for &t in targets {
        members[spec.bucket_of(counts[t])].push(t);
    }
    let total = targets.len().max(1) as f64;
    let pct = members
        .iter()
        .map(|m| 100.0 * m.len() as f64 / total)
        .collect();
    Ok(BucketAssignment { members, pct })
}

/// Full-catalog rank of `target` after consuming `history`.
pub fn user_rank<S: Scalar>(
    params: &ModelParams<S>,
    codes: &SemanticIdTable,
    history: &[usize],
    target: usize,
) -> Result<usize, EvalError> {
    assert!(!history.is_empty(), "history must be non-empty");
    // Histories longer than the context window keep only the most recent steps.
    let start = history.len().saturating_sub(params.config.max_steps);
    let seq = codes.codes_for(&history[start..]);
    let out = forward_sequence_values(params, ArrayView2::from(&seq.view()))?;
    let h = out.intent_reps.row(out.intent_reps.nrows() - 1);
    let table = subspace_logprob_matrix(params, h);
    let scores = holistic_scores(&table, codes)?;
    Ok(rank_of_item(&scores, target))
}

/// Mean (NDCG@10, Recall@10) over validation targets; history is the train
/// sequence. Used for model selection during training.
pub fn validation_metrics<S: Scalar>(
    params: &ModelParams<S>,
    split: &SplitDataset,
    codes: &SemanticIdTable,
) -> Result<(f64, f64), EvalError> {
    let users: Vec<_> = split.users.values().collect();
    if users.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let ranks: Result<Vec<usize>, EvalError> = users
        .par_iter()
        .map(|u| user_rank(params, codes, &u.train, u.val))
        .collect();
    let ranks = ranks?;
    let n = ranks.len() as f64;
    let ndcg = ranks.iter().map(|&r| ndcg_at_k(r, 10)).sum::<f64>() / n;
    let recall = ranks.iter().map(|&r| recall_at_k(r, 10)).sum::<f64>() / n;
    Ok((ndcg, recall))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverallMetrics {
    #[serde(rename = "recall@5")]
    pub recall5: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "recall@10")]
    pub recall10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub range: String,
    pub count: usize,
    pub pct: f64,
    #[serde(rename = "recall@10")]
    pub recall10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: OverallMetrics,
    pub buckets: Vec<BucketMetrics>,
    pub n_users: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table for terminal output.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "overall ({} users): recall@5 {:.4}  ndcg@5 {:.4}  recall@10 {:.4}  ndcg@10 {:.4}\n",
            self.n_users,
            self.overall.recall5,
            self.overall.ndcg5,
            self.overall.recall10,
            self.overall.ndcg10
        ));
        out.push_str("bucket      count    pct      recall@10  ndcg@10\n");
        for b in &self.buckets {
            out.push_str(&format!(
                "{:<11} {:<8} {:<8.2} {:<10.4} {:.4}\n",
                b.range, b.count, b.pct, b.recall10, b.ndcg10
            ));
        }
        out
    }
}

/// Rank every user's test target after its train history, aggregate overall
/// Recall/NDCG at 5 and 10, and break NDCG@10/Recall@10 down by the target's
/// train-frequency bucket.
pub fn evaluate_split<S: Scalar>(
    params: &ModelParams<S>,
    split: &SplitDataset,
    codes: &SemanticIdTable,
    spec: &BucketSpec,
    config_fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    let users: Vec<_> = split.users.values().collect();
    if users.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let ranks: Result<Vec<usize>, EvalError> = users
        .par_iter()
        .map(|u| user_rank(params, codes, &u.train, u.test))
        .collect();
    let ranks = ranks?;
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    let overall = OverallMetrics {
        recall5: mean(&|r| recall_at_k(r, 5)),
        ndcg5: mean(&|r| ndcg_at_k(r, 5)),
        recall10: mean(&|r| recall_at_k(r, 10)),
        ndcg10: mean(&|r| ndcg_at_k(r, 10)),
    };
    let counts = train_item_counts(split);
    let mut bucket_ranks: Vec<Vec<usize>> = vec![Vec::new(); spec.ranges.len()];
    for (u, &rank) in users.iter().zip(ranks.iter()) {
        bucket_ranks[spec.bucket_of(counts[u.test])].push(rank);
    }
    let buckets = bucket_ranks
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            // Empty f64 sums yield -0.0 (the float additive identity), which
            // would leak a minus sign into the report.
            let bucket_mean = |f: fn(usize, usize) -> f64| {
                if rs.is_empty() {
                    0.0
                } else {
                    rs.iter().map(|&r| f(r, 10)).sum::<f64>() / rs.len() as f64
                }
            };
            BucketMetrics {
                range: spec.label(i),
                count: rs.len(),
                pct: 100.0 * rs.len() as f64 / n,
                recall10: bucket_mean(recall_at_k),
                ndcg10: bucket_mean(ndcg_at_k),
            }
        })
        .collect();
    Ok(EvalReport {
        overall,
        buckets,
        n_users: ranks.len(),
        config_fingerprint: config_fingerprint.to_string(),
    })
}
