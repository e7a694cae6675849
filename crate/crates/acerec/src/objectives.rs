//! Training objectives: per-digit next-token cross-entropy over codewords,
//! the popularity-debiased sequence-item alignment contrast, and their
//! weighted combination.
//!
//! Graph builders return un-normalized sums over supervised positions so the
//! caller can pick the batch normalization (and gradient seed) once.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::collections::HashMap;
use std::sync::Arc;

use crate::graph::{Graph, NodeId, NORM_EPS};
use crate::model::{
    attach_leaves, build_item_summaries, build_subspace_queries, build_token_embeddings,
    normalized_codeword_rows, ModelConfig, ModelParams, Tensors,
};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("candidate probability {0} outside (0, 1]")]
    InvalidProbability(f64),
    #[error("candidate probabilities sum to {0}, expected 1")]
    UnnormalizedProbabilities(f64),
    #[error("target index {target} out of range for {n} candidates")]
    TargetOutOfRange { target: usize, n: usize },
}

/// One supervised (sequence, step) pair: the intent state at `step` predicts
/// `item`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisedPosition {
    pub seq: usize,
    pub step: usize,
    pub item: usize,
}

/// Supervision targets for one batch of item-index sequences.
#[derive(Debug, Clone)]
pub struct BatchTargets {
    /// Every valid next-item position (used by the per-digit loss).
    pub mtp_positions: Vec<SupervisedPosition>,
    /// Positions the alignment loss contrasts (all, or final-only).
    pub isa_positions: Vec<SupervisedPosition>,
    /// Distinct alignment targets in first-appearance order.
    pub candidates: Vec<usize>,
    /// Empirical probability of each candidate among alignment targets.
    pub probs: Vec<f64>,
    slot: HashMap<usize, usize>,
}

impl BatchTargets {
    /// Steps t = 0..L-2 of each sequence predict the item at t+1. Sequences
    /// shorter than two items contribute nothing.
    pub fn from_batch(sequences: &[&[usize]], isa_final_only: bool) -> Self {
        let mut mtp_positions = Vec::new();
        let mut isa_positions = Vec::new();
        for (seq, items) in sequences.iter().enumerate() {
            if items.len() < 2 {
                continue;
            }
            for t in 0..items.len() - 1 {
                let pos = SupervisedPosition {
                    seq,
                    step: t,
                    item: items[t + 1],
                };
                mtp_positions.push(pos);
                if !isa_final_only || t == items.len() - 2 {
                    isa_positions.push(pos);
                }
            }
        }
        let mut slot = HashMap::new();
        let mut candidates = Vec::new();
        let mut counts = Vec::new();
        for pos in &isa_positions {
            match slot.get(&pos.item) {
                Some(&i) => counts[i] += 1usize,
                None => {
                    slot.insert(pos.item, candidates.len());
                    candidates.push(pos.item);
                    counts.push(1);
                }
            }
        }
        let total = isa_positions.len().max(1) as f64;
        let probs = counts.iter().map(|&c| c as f64 / total).collect();
        BatchTargets {
            mtp_positions,
            isa_positions,
            candidates,
            probs,
            slot,
        }
    }

    /// Candidate column for an alignment target item.
    pub fn candidate_slot(&self, item: usize) -> usize {
        self.slot[&item]
    }
}

// --- Graph builders -----------------------------------------------------------

/// Σ over positions of the per-digit mean negative log-likelihood. `preds`
/// is P×d intent states, `target_codes` the P×m codes of the true next
/// items. Codeword matching is cosine at temperature γ.
pub fn build_mtp_nll<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    config: &ModelConfig,
    preds: NodeId,
    target_codes: ArrayView2<u16>,
) -> NodeId {
    assert_eq!(target_codes.ncols(), config.m);
    let queries = build_subspace_queries(g, leaves, preds);
    let inv_gamma = S::c(1.0 / config.gamma);
    let mut total: Option<NodeId> = None;
    for (j, &q) in queries.iter().enumerate() {
        let table = normalized_codeword_rows(g, leaves, j);
        let logits = g.matmul_nt(q, table);
        let logits = g.scale(logits, inv_gamma);
        let logp = g.log_softmax_rows(logits);
        let targets: Vec<usize> = target_codes.column(j).iter().map(|&c| c as usize).collect();
        let nll = g.nll_pick_sum(logp, Arc::from(targets));
        total = Some(match total {
            Some(t) => g.add(t, nll),
            None => nll,
        });
    }
    let total = total.expect("m >= 1");
    g.scale(total, S::c(1.0 / config.m as f64))
}

/// Σ over positions of the alignment cross-entropy. Candidate summaries are
/// computed live from their codes; scores are cos/τ − β·log P(j). `targets`
/// maps each prediction row to its candidate column.
pub fn build_isa_nll<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    config: &ModelConfig,
    preds: NodeId,
    candidate_codes: ArrayView2<u16>,
    candidate_probs: &[f64],
    targets: &[usize],
) -> NodeId {
    let n_cand = candidate_codes.nrows();
    assert_eq!(candidate_probs.len(), n_cand);
    let emb = build_token_embeddings(g, leaves, candidate_codes);
    let summaries = build_item_summaries(g, leaves, config.m, emb);
    let hn = g.l2_normalize_rows(preds);
    let sn = g.l2_normalize_rows(summaries);
    let sims = g.matmul_nt(hn, sn);
    let logits = g.scale(sims, S::c(1.0 / config.tau));
    let debias =
        Array2::from_shape_fn((1, n_cand), |(_, j)| S::c(-config.beta * candidate_probs[j].ln()));
    let debias = g.constant(debias);
    let logits = g.add_row(logits, debias);
    let logp = g.log_softmax_rows(logits);
    g.nll_pick_sum(logp, Arc::from(targets.to_vec()))
}

// --- Plain operations ---------------------------------------------------------

/// Probability over the M codewords of one digit given an intent state.
pub fn mtp_digit_distribution<S: Scalar>(
    params: &ModelParams<S>,
    h: ArrayView1<S>,
    digit: usize,
) -> Array1<S> {
    let config = &params.config;
    assert!(digit < config.m, "digit {digit} out of range");
    assert_eq!(h.len(), config.d);
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let hc = g.constant(
        h.to_owned()
            .into_shape_with_order((1, config.d))
            .expect("row reshape"),
    );
    let queries = build_subspace_queries(&mut g, &leaves, hc);
    let table = normalized_codeword_rows(&mut g, &leaves, digit);
    let logits = g.matmul_nt(queries[digit], table);
    let logits = g.scale(logits, S::c(1.0 / config.gamma));
    let probs = g.softmax_rows(logits);
    g.value(probs).row(0).to_owned()
}

/// Mean over positions and digits of −log p(target code).
pub fn mtp_loss<S: Scalar>(
    params: &ModelParams<S>,
    preds: &Array2<S>,
    target_codes: ArrayView2<u16>,
) -> f64 {
    assert_eq!(preds.nrows(), target_codes.nrows());
    assert!(preds.nrows() > 0, "need at least one supervised position");
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let p = g.constant(preds.clone());
    let nll = build_mtp_nll(&mut g, &leaves, &params.config, p, target_codes);
    g.value(nll)[[0, 0]].to_f64c() / preds.nrows() as f64
}

/// Debiased alignment score φ = cos(h, s)/τ − β·log P(j).
pub fn isa_debiased_score<S: Scalar>(
    h: ArrayView1<S>,
    s: ArrayView1<S>,
    p_j: f64,
    tau: f64,
    beta: f64,
) -> Result<f64, ObjectiveError> {
    if !(p_j > 0.0 && p_j <= 1.0) {
        return Err(ObjectiveError::InvalidProbability(p_j));
    }
    let dot: f64 = h
        .iter()
        .zip(s.iter())
        .map(|(a, b)| a.to_f64c() * b.to_f64c())
        .sum();
    let nh: f64 = h.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
    let ns: f64 = s.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
    let cos = dot / ((nh + NORM_EPS) * (ns + NORM_EPS));
    Ok(cos / tau - beta * p_j.ln())
}

/// Mean alignment cross-entropy over prediction rows. A single-candidate
/// batch has nothing to contrast and scores 0.
pub fn isa_loss<S: Scalar>(
    params: &ModelParams<S>,
    preds: &Array2<S>,
    candidate_codes: ArrayView2<u16>,
    candidate_probs: &[f64],
    targets: &[usize],
) -> Result<f64, ObjectiveError> {
    let n_cand = candidate_codes.nrows();
    for &p in candidate_probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ObjectiveError::InvalidProbability(p));
        }
    }
    let total: f64 = candidate_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::UnnormalizedProbabilities(total));
    }
    for &t in targets {
        if t >= n_cand {
            return Err(ObjectiveError::TargetOutOfRange { target: t, n: n_cand });
        }
    }
    assert_eq!(preds.nrows(), targets.len());
    if n_cand < 2 {
        log::warn!("alignment batch has a single distinct target; loss is 0");
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let p = g.constant(preds.clone());
    let nll = build_isa_nll(
        &mut g,
        &leaves,
        &params.config,
        p,
        candidate_codes,
        candidate_probs,
        targets,
    );
    Ok(g.value(nll)[[0, 0]].to_f64c() / preds.nrows().max(1) as f64)
}

/// Combined objective: mtp + λ·isa.
pub fn joint_loss(mtp: f64, isa: f64, lambda: f64) -> f64 {
    mtp + lambda * isa
}
