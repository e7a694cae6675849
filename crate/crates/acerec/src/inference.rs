//! Two-phase holistic candidate scoring: one m×M table of per-digit codeword
//! log-probabilities, then a vectorized gather-and-sum over the catalog.
//! Table construction never touches the catalog, so its cost is independent
//! of |I|; the gather is a pure indexed read.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::graph::{l2_normalize_rows, log_softmax_rows, NORM_EPS};
use crate::model::ModelParams;
use crate::opq::SemanticIdTable;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("item {item} digit {digit} has code {code}, table has {m_size} codewords")]
    CodeOutOfRange {
        item: usize,
        digit: usize,
        code: usize,
        m_size: usize,
    },
    #[error("code table has {got} digits, log-prob table has {expected}")]
    DigitMismatch { expected: usize, got: usize },
}

/// Per-digit codeword log-probabilities for one prediction state; entry
/// [k, v] is log p(codeword v | digit k).
#[derive(Debug, Clone)]
pub struct SubspaceLogProbMatrix<S: Scalar> {
    pub values: Array2<S>,
}

impl<S: Scalar> SubspaceLogProbMatrix<S> {
    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn codebook_size(&self) -> usize {
        self.values.ncols()
    }
}

/// Build the m×M log-probability table for one intent state. Work is
/// m·(d² + M·d), independent of catalog size.
pub fn subspace_logprob_matrix<S: Scalar>(
    params: &ModelParams<S>,
    h: ArrayView1<S>,
) -> SubspaceLogProbMatrix<S> {
    let config = &params.config;
    assert_eq!(h.len(), config.d);
    let hrow = h
        .to_owned()
        .into_shape_with_order((1, config.d))
        .expect("row reshape");
    let hn = l2_normalize_rows(&hrow);
    let inv_gamma = S::c(1.0 / config.gamma);
    let mut values = Array2::zeros((config.m, config.codebook_size));
    for j in 0..config.m {
        let head = &params.tensors.heads[j];
        let u = hn.dot(head.w.as_ref()) + head.b.as_ref();
        let un = l2_normalize_rows(&u);
        let tn = l2_normalize_rows(params.codeword_table(j));
        let logits = un.dot(&tn.t()).mapv(|v| v * inv_gamma);
        let logp = log_softmax_rows(&logits);
        values.row_mut(j).assign(&logp.row(0));
    }
    SubspaceLogProbMatrix { values }
}

/// Score every catalog item: Score(j) = Σ_k table[k, c_{j,k}]. Pure gather,
/// no embedding math.
pub fn holistic_scores<S: Scalar>(
    table: &SubspaceLogProbMatrix<S>,
    codes: &SemanticIdTable,
) -> Result<Vec<S>, InferenceError> {
    if codes.m() != table.m() {
        return Err(InferenceError::DigitMismatch {
            expected: table.m(),
            got: codes.m(),
        });
    }
    let m_size = table.codebook_size();
    let m = table.m();
    let values = &table.values;
    let rows = codes.codes.rows().into_iter().collect::<Vec<_>>();
    rows.par_iter()
        .enumerate()
        .map(|(item, row)| {
            let mut score = S::zero();
            for (digit, &c) in row.iter().enumerate() {
                let code = c as usize;
                if code >= m_size {
                    return Err(InferenceError::CodeOutOfRange {
                        item,
                        digit,
                        code,
                        m_size,
                    });
                }
                score += values[[digit, code]];
            }
            debug_assert_eq!(row.len(), m);
            Ok(score)
        })
        .collect()
}

/// Items with scores, best first; equal scores rank lower indices first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<S: Scalar> {
    pub entries: Vec<(usize, S)>,
}

/// Top K by (score descending, index ascending). K beyond the catalog
/// returns the full ranking.
pub fn top_k<S: Scalar>(scores: &[S], k: usize) -> RankedList<S> {
    assert!(k >= 1, "need K >= 1");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    RankedList {
        entries: order.into_iter().map(|i| (i, scores[i])).collect(),
    }
}

/// 1-based rank of `item` under the top_k comparator over the full catalog.
pub fn rank_of_item<S: Scalar>(scores: &[S], item: usize) -> usize {
    let s = scores[item];
    let mut rank = 1;
    for (j, &v) in scores.iter().enumerate() {
        if v > s || (v == s && j < item) {
            rank += 1;
        }
    }
    rank
}

/// Brute-force reference: re-derives every item's score from per-digit
/// distributions without the shared table. O(|I|·m·M·d); test use only.
pub fn oracle_scores<S: Scalar>(
    params: &ModelParams<S>,
    h: ArrayView1<S>,
    codes: &SemanticIdTable,
) -> Result<Vec<S>, InferenceError> {
    let config = &params.config;
    if codes.m() != config.m {
        return Err(InferenceError::DigitMismatch {
            expected: config.m,
            got: codes.m(),
        });
    }
    // query per digit (h-side work, shared legitimately across items)
    let hnorm: f64 = h.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
    let hn: Vec<S> = h
        .iter()
        .map(|&v| S::c(v.to_f64c() / (hnorm + NORM_EPS)))
        .collect();
    let queries: Vec<Vec<S>> = (0..config.m)
        .map(|j| {
            let head = &params.tensors.heads[j];
            let mut u = vec![S::zero(); config.d];
            for c in 0..config.d {
                let mut acc = head.b[[0, c]];
                for r in 0..config.d {
                    acc += hn[r] * head.w[[r, c]];
                }
                u[c] = acc;
            }
            let norm: f64 = u.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>().sqrt();
            u.into_iter()
                .map(|v| S::c(v.to_f64c() / (norm + NORM_EPS)))
                .collect()
        })
        .collect();
    let mut scores = Vec::with_capacity(codes.n_items());
    for item in 0..codes.n_items() {
        let mut score = S::zero();
        for j in 0..config.m {
            let target = codes.code(item, j);
            if target >= config.codebook_size {
                return Err(InferenceError::CodeOutOfRange {
                    item,
                    digit: j,
                    code: target,
                    m_size: config.codebook_size,
                });
            }
            let table = params.codeword_table(j);
            let mut logits = Vec::with_capacity(config.codebook_size);
            for v in 0..config.codebook_size {
                let row = table.row(v);
                let norm: f64 = row.iter().map(|x| x.to_f64c().powi(2)).sum::<f64>().sqrt();
                let mut dot = S::zero();
                for c in 0..config.d {
                    dot += queries[j][c] * row[c];
                }
                logits.push(S::c(
                    dot.to_f64c() / (norm + NORM_EPS) / config.gamma,
                ));
            }
            let mx = logits
                .iter()
                .cloned()
                .fold(S::c(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
            let lse: S = mx
                + S::c(
                    logits
                        .iter()
                        .map(|&l| (l - mx).to_f64c().exp())
                        .sum::<f64>()
                        .ln(),
                );
            score += logits[target] - lse;
        }
        scores.push(score);
    }
    Ok(scores)
}
