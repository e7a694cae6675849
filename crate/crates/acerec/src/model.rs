//! Model parameters and the forward computation: per-digit token embedding,
//! item summary, attentive token merging into k latent tokens, composite
//! blocks with an intent token, a step-masked pre-norm decoder backbone, and
//! per-subspace projection heads.
//!
//! Forward passes build a [`Graph`] so the same code path serves training,
//! plain evaluation, and the finite-difference harness.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::graph::{Graph, NodeId, MASK_NEG};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("code {code} out of range for codebook size {m_size} (step {step}, digit {digit})")]
    CodeOutOfRange {
        step: usize,
        digit: usize,
        code: usize,
        m_size: usize,
    },
    #[error("sequence length {len} exceeds max_steps {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("digit count {got} does not match config m={expected}")]
    DigitMismatch { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the m token embeddings collapse into k latent tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergerKind {
    /// Cross-attention from content-adaptive latent queries.
    #[default]
    Attentive,
    /// Ablation: contiguous mean pooling of m/k tokens per latent, keeping
    /// the output MLP and norm.
    MeanPool,
}

/// Architecture and objective hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Model dimension.
    pub d: usize,
    /// Digits per item (subspaces).
    pub m: usize,
    /// Latent tokens per item.
    pub k: usize,
    /// Codebook size per digit.
    #[serde(rename = "M")]
    pub codebook_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Maximum sequence length L.
    pub max_steps: usize,
    /// Next-token prediction temperature.
    pub gamma: f64,
    /// Sequence-item alignment temperature.
    pub tau: f64,
    /// Popularity debiasing strength.
    pub beta: f64,
    /// Alignment loss weight.
    pub lambda: f64,
    /// Codeword embeddings reuse the input token tables.
    pub tied_codewords: bool,
    #[serde(default)]
    pub merger: MergerKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 448,
            m: 32,
            k: 4,
            codebook_size: 256,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 1024,
            max_steps: 50,
            gamma: 0.03,
            tau: 0.07,
            beta: 0.02,
            lambda: 0.01,
            tied_codewords: true,
            merger: MergerKind::Attentive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.m == 0 || self.k == 0 || self.codebook_size == 0 {
            return Err(ModelError::BadConfig(
                "d, m, k, and codebook size must be positive".into(),
            ));
        }
        if self.k >= self.m {
            return Err(ModelError::BadConfig(format!(
                "need k < m, got k={} m={}",
                self.k, self.m
            )));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d={} must be divisible by n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ffn_dim == 0 || self.max_steps == 0 {
            return Err(ModelError::BadConfig(
                "n_layers, ffn_dim, and max_steps must be positive".into(),
            ));
        }
        if !(self.gamma > 0.0) || !(self.tau > 0.0) {
            return Err(ModelError::BadConfig("gamma and tau must be > 0".into()));
        }
        if self.beta < 0.0 || self.lambda < 0.0 {
            return Err(ModelError::BadConfig("beta and lambda must be >= 0".into()));
        }
        if self.merger == MergerKind::MeanPool && self.m % self.k != 0 {
            return Err(ModelError::BadConfig(format!(
                "mean-pool merger needs k to divide m, got m={} k={}",
                self.m, self.k
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    /// Compression ratio m/k (informational).
    pub fn compression_ratio(&self) -> f64 {
        self.m as f64 / self.k as f64
    }

    /// Backbone token count for an L-step sequence.
    pub fn n_tokens(&self, n_steps: usize) -> usize {
        n_steps * (self.k + 1)
    }
}

// --- Parameter containers ----------------------------------------------------
//
// `Tensors<T>` holds every learnable tensor; `T` is `Arc<Array2<S>>` for
// storage and `NodeId` once attached to a graph. `map_named` defines the one
// canonical traversal order used for checkpoints and optimizer state.

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct Attn<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

#[derive(Debug, Clone)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub attn: Attn<T>,
    pub norm2: Norm<T>,
    pub ffn: Mlp<T>,
}

#[derive(Debug, Clone)]
pub struct Tensors<T> {
    pub token_tables: Vec<T>,
    /// Separate codeword tables when untied; `None` when tied.
    pub output_tables: Option<Vec<T>>,
    pub digit_pos: T,
    pub step_pos: T,
    pub intent_bias: T,
    pub atm_fs: Mlp<T>,
    pub atm_fq: Linear<T>,
    pub atm_attn: Attn<T>,
    pub atm_fout: Mlp<T>,
    pub atm_fout_norm: Norm<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Norm<T>,
    pub heads: Vec<Linear<T>>,
}

impl<T> Tensors<T> {
    /// Canonical traversal; every other walk derives from this one.
    pub fn map_named<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> Tensors<U> {
        let mlp = |f: &mut dyn FnMut(&str, &T) -> U, prefix: &str, p: &Mlp<T>| Mlp {
            w1: f(&format!("{prefix}.w1"), &p.w1),
            b1: f(&format!("{prefix}.b1"), &p.b1),
            w2: f(&format!("{prefix}.w2"), &p.w2),
            b2: f(&format!("{prefix}.b2"), &p.b2),
        };
        let attn = |f: &mut dyn FnMut(&str, &T) -> U, prefix: &str, p: &Attn<T>| Attn {
            wq: f(&format!("{prefix}.wq"), &p.wq),
            bq: f(&format!("{prefix}.bq"), &p.bq),
            wk: f(&format!("{prefix}.wk"), &p.wk),
            bk: f(&format!("{prefix}.bk"), &p.bk),
            wv: f(&format!("{prefix}.wv"), &p.wv),
            bv: f(&format!("{prefix}.bv"), &p.bv),
            wo: f(&format!("{prefix}.wo"), &p.wo),
            bo: f(&format!("{prefix}.bo"), &p.bo),
        };
        let norm = |f: &mut dyn FnMut(&str, &T) -> U, prefix: &str, p: &Norm<T>| Norm {
            gain: f(&format!("{prefix}.gain"), &p.gain),
            bias: f(&format!("{prefix}.bias"), &p.bias),
        };
        let linear = |f: &mut dyn FnMut(&str, &T) -> U, prefix: &str, p: &Linear<T>| Linear {
            w: f(&format!("{prefix}.w"), &p.w),
            b: f(&format!("{prefix}.b"), &p.b),
        };
        Tensors {
            token_tables: self
                .token_tables
                .iter()
                .enumerate()
                .map(|(j, t)| f(&format!("token_table.{j}"), t))
                .collect(),
            output_tables: self.output_tables.as_ref().map(|tables| {
                tables
                    .iter()
                    .enumerate()
                    .map(|(j, t)| f(&format!("output_table.{j}"), t))
                    .collect()
            }),
            digit_pos: f("digit_pos", &self.digit_pos),
            step_pos: f("step_pos", &self.step_pos),
            intent_bias: f("intent_bias", &self.intent_bias),
            atm_fs: mlp(f, "atm.fs", &self.atm_fs),
            atm_fq: linear(f, "atm.fq", &self.atm_fq),
            atm_attn: attn(f, "atm.attn", &self.atm_attn),
            atm_fout: mlp(f, "atm.fout", &self.atm_fout),
            atm_fout_norm: norm(f, "atm.fout_norm", &self.atm_fout_norm),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| Block {
                    norm1: norm(f, &format!("block.{l}.norm1"), &b.norm1),
                    attn: attn(f, &format!("block.{l}.attn"), &b.attn),
                    norm2: norm(f, &format!("block.{l}.norm2"), &b.norm2),
                    ffn: mlp(f, &format!("block.{l}.ffn"), &b.ffn),
                })
                .collect(),
            final_norm: norm(f, "final_norm", &self.final_norm),
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(j, h)| linear(f, &format!("head.{j}"), h))
                .collect(),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.map_named(&mut |name, t| f(name, t));
    }

    /// Mutable walk in the same canonical order as [`Tensors::map_named`].
    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        for (j, t) in self.token_tables.iter_mut().enumerate() {
            f(&format!("token_table.{j}"), t);
        }
        if let Some(tables) = self.output_tables.as_mut() {
            for (j, t) in tables.iter_mut().enumerate() {
                f(&format!("output_table.{j}"), t);
            }
        }
        f("digit_pos", &mut self.digit_pos);
        f("step_pos", &mut self.step_pos);
        f("intent_bias", &mut self.intent_bias);
        let mlp = |f: &mut dyn FnMut(&str, &mut T), prefix: &str, p: &mut Mlp<T>| {
            f(&format!("{prefix}.w1"), &mut p.w1);
            f(&format!("{prefix}.b1"), &mut p.b1);
            f(&format!("{prefix}.w2"), &mut p.w2);
            f(&format!("{prefix}.b2"), &mut p.b2);
        };
        let attn = |f: &mut dyn FnMut(&str, &mut T), prefix: &str, p: &mut Attn<T>| {
            f(&format!("{prefix}.wq"), &mut p.wq);
            f(&format!("{prefix}.bq"), &mut p.bq);
            f(&format!("{prefix}.wk"), &mut p.wk);
            f(&format!("{prefix}.bk"), &mut p.bk);
            f(&format!("{prefix}.wv"), &mut p.wv);
            f(&format!("{prefix}.bv"), &mut p.bv);
            f(&format!("{prefix}.wo"), &mut p.wo);
            f(&format!("{prefix}.bo"), &mut p.bo);
        };
        let norm = |f: &mut dyn FnMut(&str, &mut T), prefix: &str, p: &mut Norm<T>| {
            f(&format!("{prefix}.gain"), &mut p.gain);
            f(&format!("{prefix}.bias"), &mut p.bias);
        };
        mlp(f, "atm.fs", &mut self.atm_fs);
        f("atm.fq.w", &mut self.atm_fq.w);
        f("atm.fq.b", &mut self.atm_fq.b);
        attn(f, "atm.attn", &mut self.atm_attn);
        mlp(f, "atm.fout", &mut self.atm_fout);
        norm(f, "atm.fout_norm", &mut self.atm_fout_norm);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            norm(f, &format!("block.{l}.norm1"), &mut b.norm1);
            attn(f, &format!("block.{l}.attn"), &mut b.attn);
            norm(f, &format!("block.{l}.norm2"), &mut b.norm2);
            mlp(f, &format!("block.{l}.ffn"), &mut b.ffn);
        }
        norm(f, "final_norm", &mut self.final_norm);
        for (j, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head.{j}.w"), &mut h.w);
            f(&format!("head.{j}.b"), &mut h.b);
        }
    }
}

/// All learnable state plus its config.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub config: ModelConfig,
    pub tensors: Tensors<Arc<Array2<S>>>,
}

type P<S> = Arc<Array2<S>>;

impl<S: Scalar> ModelParams<S> {
    /// Seeded initialization: weights N(0, 0.02), biases zero, norm gains
    /// one. Draws happen in f64 so f32 and f64 models share a stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut w = |r: usize, c: usize| -> P<S> {
            Arc::new(Array2::from_shape_fn((r, c), |_| {
                S::c(normal.sample(&mut rng))
            }))
        };
        let zeros = |r: usize, c: usize| -> P<S> { Arc::new(Array2::zeros((r, c))) };
        let ones = |r: usize, c: usize| -> P<S> { Arc::new(Array2::from_elem((r, c), S::one())) };
        let (d, m, k, msize, ffn) = (
            config.d,
            config.m,
            config.k,
            config.codebook_size,
            config.ffn_dim,
        );
        let mlp_p = |inner: &mut dyn FnMut(usize, usize) -> P<S>| Mlp {
            w1: inner(d, ffn),
            b1: zeros(1, ffn),
            w2: inner(ffn, d),
            b2: zeros(1, d),
        };
        let attn_p = |inner: &mut dyn FnMut(usize, usize) -> P<S>| Attn {
            wq: inner(d, d),
            bq: zeros(1, d),
            wk: inner(d, d),
            bk: zeros(1, d),
            wv: inner(d, d),
            bv: zeros(1, d),
            wo: inner(d, d),
            bo: zeros(1, d),
        };
        let norm_p = || Norm {
            gain: ones(1, d),
            bias: zeros(1, d),
        };
        let tensors = Tensors {
            token_tables: (0..m).map(|_| w(msize, d)).collect(),
            output_tables: if config.tied_codewords {
                None
            } else {
                Some((0..m).map(|_| w(msize, d)).collect())
            },
            digit_pos: w(m, d),
            step_pos: w(config.max_steps, d),
            intent_bias: zeros(1, d),
            atm_fs: mlp_p(&mut w),
            atm_fq: Linear {
                w: w(d, k * d),
                b: zeros(1, k * d),
            },
            atm_attn: attn_p(&mut w),
            atm_fout: mlp_p(&mut w),
            atm_fout_norm: norm_p(),
            blocks: (0..config.n_layers)
                .map(|_| Block {
                    norm1: norm_p(),
                    attn: attn_p(&mut w),
                    norm2: norm_p(),
                    ffn: mlp_p(&mut w),
                })
                .collect(),
            final_norm: norm_p(),
            heads: (0..m)
                .map(|_| Linear {
                    w: w(d, d),
                    b: zeros(1, d),
                })
                .collect(),
        };
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// All-zero skeleton with correct shapes (checkpoint loading).
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        p.tensors.for_each_mut(&mut |_, t: &mut P<S>| {
            *t = Arc::new(Array2::zeros(t.dim()));
        });
        Ok(p)
    }

    /// Count of scalar parameters.
    pub fn n_parameters(&self) -> usize {
        let mut n = 0;
        self.tensors.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.tensors.for_each(&mut |_, t| {
            if t.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Codeword table for digit j (tied to the input table by default).
    pub fn codeword_table(&self, j: usize) -> &P<S> {
        match &self.tensors.output_tables {
            Some(tables) => &tables[j],
            None => &self.tensors.token_tables[j],
        }
    }
}

// --- Step mask ----------------------------------------------------------------

/// Attention permissions over the N = L·(k+1) backbone tokens. Within step
/// t, token layout is [z_{t,1}, …, z_{t,k}, h_t].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMask {
    pub allow: Array2<bool>,
    pub n_steps: usize,
    pub k: usize,
}

/// Tokens of step t may attend to every token of earlier steps. Within a
/// step, latents attend to each other (including self), the intent token
/// attends to its latents and itself, and latents never attend to the
/// intent token.
pub fn build_step_mask(n_steps: usize, k: usize) -> StepMask {
    assert!(n_steps >= 1 && k >= 1, "mask needs n_steps >= 1 and k >= 1");
    let stride = k + 1;
    let n = n_steps * stride;
    let mut allow = Array2::from_elem((n, n), false);
    for q in 0..n {
        let (qs, qp) = (q / stride, q % stride);
        let q_intent = qp == k;
        for src in 0..n {
            let (ss, sp) = (src / stride, src % stride);
            let s_intent = sp == k;
            allow[[q, src]] = if ss < qs {
                true
            } else if ss > qs {
                false
            } else if !s_intent {
                true // latent source: both latents and the intent may look
            } else {
                q_intent && q == src // intent source: only its own self-loop
            };
        }
    }
    StepMask {
        allow,
        n_steps,
        k,
    }
}

impl StepMask {
    /// Additive form: 0 where allowed, a value so negative that softmax
    /// weights underflow to exactly zero where forbidden.
    pub fn additive<S: Scalar>(&self) -> Array2<S> {
        self.allow
            .mapv(|a| if a { S::zero() } else { S::c(MASK_NEG) })
    }
}

// --- Graph builders -----------------------------------------------------------

/// Insert every parameter as a trainable leaf; shapes mirror the storage.
pub fn attach_leaves<S: Scalar>(g: &mut Graph<S>, params: &ModelParams<S>) -> Tensors<NodeId> {
    params
        .tensors
        .map_named(&mut |_, t: &P<S>| g.leaf(t.clone(), true))
}

fn linear<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let p = g.matmul(x, w);
    g.add_row(p, b)
}

fn mlp<S: Scalar>(g: &mut Graph<S>, p: &Mlp<NodeId>, x: NodeId) -> NodeId {
    let h = linear(g, x, p.w1, p.b1);
    let h = g.gelu(h);
    linear(g, h, p.w2, p.b2)
}

/// Token embeddings for a batch of items: output row i·m + j is digit j of
/// item i (no positional term).
pub fn build_token_embeddings<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    codes: ArrayView2<u16>,
) -> NodeId {
    let n = codes.nrows();
    let m = codes.ncols();
    let per_digit: Vec<NodeId> = (0..m)
        .map(|j| {
            let idx: Vec<usize> = (0..n).map(|i| codes[[i, j]] as usize).collect();
            g.gather_rows(leaves.token_tables[j], Arc::from(idx))
        })
        .collect();
    let stacked = g.concat_rows(&per_digit); // row j·n + i
    let mut interleave = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            interleave.push(j * n + i);
        }
    }
    g.gather_rows(stacked, Arc::from(interleave))
}

/// Item summaries s_i: per-item mean of the m token embeddings plus a
/// two-layer MLP with residual.
pub fn build_item_summaries<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    m: usize,
    emb: NodeId,
) -> NodeId {
    let means = g.group_mean_rows(emb, m);
    let h = mlp(g, &leaves.atm_fs, means);
    g.add(means, h)
}

/// One cross-attention merge: k query rows over m key/value rows, then the
/// output MLP with residual and layer norm. Returns (k×d latents, per-head
/// k×m attention weights).
fn atm_step<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    config: &ModelConfig,
    q: NodeId,
    kv: NodeId,
) -> (NodeId, Vec<NodeId>) {
    let a = &leaves.atm_attn;
    let hd = config.head_dim();
    let scale = S::c(1.0 / (hd as f64).sqrt());
    let qp = linear(g, q, a.wq, a.bq);
    let kp = linear(g, kv, a.wk, a.bk);
    let vp = linear(g, kv, a.wv, a.bv);
    let mut outs = Vec::with_capacity(config.n_heads);
    let mut weights = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = g.slice_cols(qp, h * hd, hd);
        let kh = g.slice_cols(kp, h * hd, hd);
        let vh = g.slice_cols(vp, h * hd, hd);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores);
        weights.push(w);
        outs.push(g.matmul(w, vh));
    }
    let merged = g.concat_cols(&outs);
    let attn_out = linear(g, merged, a.wo, a.bo);
    let f = mlp(g, &leaves.atm_fout, attn_out);
    let sum = g.add(attn_out, f);
    let z = g.layer_norm(sum, leaves.atm_fout_norm.gain, leaves.atm_fout_norm.bias);
    (z, weights)
}

fn self_attention_block<S: Scalar>(
    g: &mut Graph<S>,
    block: &Block<NodeId>,
    config: &ModelConfig,
    x: NodeId,
    mask: NodeId,
) -> NodeId {
    let hd = config.head_dim();
    let scale = S::c(1.0 / (hd as f64).sqrt());
    let xn = g.layer_norm(x, block.norm1.gain, block.norm1.bias);
    let qp = linear(g, xn, block.attn.wq, block.attn.bq);
    let kp = linear(g, xn, block.attn.wk, block.attn.bk);
    let vp = linear(g, xn, block.attn.wv, block.attn.bv);
    let mut outs = Vec::with_capacity(config.n_heads);
    for h in 0..config.n_heads {
        let qh = g.slice_cols(qp, h * hd, hd);
        let kh = g.slice_cols(kp, h * hd, hd);
        let vh = g.slice_cols(vp, h * hd, hd);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let scores = g.add(scores, mask);
        let w = g.softmax_rows(scores);
        outs.push(g.matmul(w, vh));
    }
    let merged = g.concat_cols(&outs);
    let attn_out = linear(g, merged, block.attn.wo, block.attn.bo);
    let x = g.add(x, attn_out);
    let xn2 = g.layer_norm(x, block.norm2.gain, block.norm2.bias);
    let f = mlp(g, &block.ffn, xn2);
    g.add(x, f)
}

/// Subspace queries: the intent representation is L2-normalized, passed
/// through each head, and normalized again. One n×d node per digit.
pub fn build_subspace_queries<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    intent: NodeId,
) -> Vec<NodeId> {
    let hn = g.l2_normalize_rows(intent);
    leaves
        .heads
        .iter()
        .map(|head| {
            let u = linear(g, hn, head.w, head.b);
            g.l2_normalize_rows(u)
        })
        .collect()
}

/// L2-normalized codeword rows for digit j (tied or untied table).
pub fn normalized_codeword_rows<S: Scalar>(
    g: &mut Graph<S>,
    leaves: &Tensors<NodeId>,
    j: usize,
) -> NodeId {
    let table = match &leaves.output_tables {
        Some(tables) => tables[j],
        None => leaves.token_tables[j],
    };
    g.l2_normalize_rows(table)
}

/// A built forward pass over one sequence.
pub struct SequenceForward<S: Scalar> {
    pub graph: Graph<S>,
    pub leaves: Tensors<NodeId>,
    /// L×d; row t is the prediction state for the item at step t+1.
    pub intent_reps: NodeId,
    /// (L·k)×d; rows grouped per step.
    pub latent_reps: NodeId,
    /// L×d item summaries s_t (before the intent bias).
    pub item_summaries: NodeId,
    /// Merger attention softmax per step and head, each k×m.
    pub atm_weights: Vec<Vec<NodeId>>,
    pub n_steps: usize,
}

fn validate_codes(config: &ModelConfig, codes: &ArrayView2<u16>) -> Result<(), ModelError> {
    if codes.ncols() != config.m {
        return Err(ModelError::DigitMismatch {
            expected: config.m,
            got: codes.ncols(),
        });
    }
    for ((step, digit), &c) in codes.indexed_iter() {
        if (c as usize) >= config.codebook_size {
            return Err(ModelError::CodeOutOfRange {
                step,
                digit,
                code: c as usize,
                m_size: config.codebook_size,
            });
        }
    }
    Ok(())
}

/// Build the full forward graph for one sequence of semantic IDs (L×m).
pub fn forward_sequence<S: Scalar>(
    params: &ModelParams<S>,
    codes: ArrayView2<u16>,
) -> Result<SequenceForward<S>, ModelError> {
    let config = &params.config;
    let l = codes.nrows();
    if l == 0 {
        return Err(ModelError::BadConfig("empty sequence".into()));
    }
    if l > config.max_steps {
        return Err(ModelError::SequenceTooLong {
            len: l,
            max: config.max_steps,
        });
    }
    validate_codes(config, &codes)?;
    let (m, k, d) = (config.m, config.k, config.d);

    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);

    let emb_all = build_token_embeddings(&mut g, &leaves, codes); // (L·m)×d
    let s_all = build_item_summaries(&mut g, &leaves, m, emb_all); // L×d

    // digit positions only inside the merger's key/value side
    let digit_tiled = g.tile_rows(leaves.digit_pos, l);
    let e_tilde = g.add(emb_all, digit_tiled);

    let q_all = match config.merger {
        MergerKind::Attentive => {
            let q_flat = linear(&mut g, s_all, leaves.atm_fq.w, leaves.atm_fq.b); // L×(k·d)
            Some(g.reshape(q_flat, l * k, d))
        }
        MergerKind::MeanPool => None,
    };

    let mut z_parts = Vec::with_capacity(l);
    let mut atm_weights = Vec::with_capacity(l);
    for t in 0..l {
        let kvt = g.slice_rows(e_tilde, t * m, m);
        let (zt, wts) = match config.merger {
            MergerKind::Attentive => {
                let qt = g.slice_rows(q_all.expect("attentive path has queries"), t * k, k);
                atm_step(&mut g, &leaves, config, qt, kvt)
            }
            MergerKind::MeanPool => {
                let pooled = g.group_mean_rows(kvt, m / k);
                let f = mlp(&mut g, &leaves.atm_fout, pooled);
                let sum = g.add(pooled, f);
                let z = g.layer_norm(sum, leaves.atm_fout_norm.gain, leaves.atm_fout_norm.bias);
                (z, Vec::new())
            }
        };
        z_parts.push(zt);
        atm_weights.push(wts);
    }
    let z_all = g.concat_rows(&z_parts); // (L·k)×d
    let h_all = g.add_row(s_all, leaves.intent_bias); // L×d

    // interleave into step layout [z_{t,1..k}, h_t]
    let stacked = g.concat_rows(&[z_all, h_all]);
    let mut layout = Vec::with_capacity(l * (k + 1));
    let mut step_idx = Vec::with_capacity(l * (k + 1));
    for t in 0..l {
        for i in 0..k {
            layout.push(t * k + i);
            step_idx.push(t);
        }
        layout.push(l * k + t);
        step_idx.push(t);
    }
    let h0 = g.gather_rows(stacked, Arc::from(layout));
    let pos = g.gather_rows(leaves.step_pos, Arc::from(step_idx));
    let mut h = g.add(h0, pos);

    let mask = g.constant(build_step_mask(l, k).additive());
    for block in &leaves.blocks {
        h = self_attention_block(&mut g, block, config, h, mask);
    }
    let hf = g.layer_norm(h, leaves.final_norm.gain, leaves.final_norm.bias);

    let stride = k + 1;
    let intent_idx: Vec<usize> = (0..l).map(|t| t * stride + k).collect();
    let latent_idx: Vec<usize> = (0..l)
        .flat_map(|t| (0..k).map(move |i| t * stride + i))
        .collect();
    let intent_reps = g.gather_rows(hf, Arc::from(intent_idx));
    let latent_reps = g.gather_rows(hf, Arc::from(latent_idx));

    Ok(SequenceForward {
        graph: g,
        leaves,
        intent_reps,
        latent_reps,
        item_summaries: s_all,
        atm_weights,
        n_steps: l,
    })
}

// --- Plain wrappers -----------------------------------------------------------

/// Forward output values without the graph.
pub struct ForwardValues<S: Scalar> {
    pub intent_reps: Array2<S>,
    pub latent_reps: Array2<S>,
    pub item_summaries: Array2<S>,
}

pub fn forward_sequence_values<S: Scalar>(
    params: &ModelParams<S>,
    codes: ArrayView2<u16>,
) -> Result<ForwardValues<S>, ModelError> {
    let fwd = forward_sequence(params, codes)?;
    Ok(ForwardValues {
        intent_reps: fwd.graph.value(fwd.intent_reps).clone(),
        latent_reps: fwd.graph.value(fwd.latent_reps).clone(),
        item_summaries: fwd.graph.value(fwd.item_summaries).clone(),
    })
}

/// Token embedding rows for one item (m×d), straight table lookups.
pub fn embed_semantic_id<S: Scalar>(
    params: &ModelParams<S>,
    codes: ArrayView1<u16>,
) -> Result<Array2<S>, ModelError> {
    let config = &params.config;
    if codes.len() != config.m {
        return Err(ModelError::DigitMismatch {
            expected: config.m,
            got: codes.len(),
        });
    }
    let mut out = Array2::zeros((config.m, config.d));
    for (j, &c) in codes.iter().enumerate() {
        if (c as usize) >= config.codebook_size {
            return Err(ModelError::CodeOutOfRange {
                step: 0,
                digit: j,
                code: c as usize,
                m_size: config.codebook_size,
            });
        }
        out.row_mut(j)
            .assign(&params.tensors.token_tables[j].row(c as usize));
    }
    Ok(out)
}

/// Item summary for explicit token embeddings (n·m rows → n summaries).
pub fn summarize_items<S: Scalar>(params: &ModelParams<S>, emb: &Array2<S>) -> Array2<S> {
    assert_eq!(emb.nrows() % params.config.m, 0, "rows must be n·m");
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let e = g.constant(emb.clone());
    let s = build_item_summaries(&mut g, &leaves, params.config.m, e);
    g.value(s).clone()
}

/// Merge explicit token embeddings with an explicit summary: returns the k×d
/// latents and the per-head k×m attention weights.
pub fn atm_merge<S: Scalar>(
    params: &ModelParams<S>,
    e_i: &Array2<S>,
    s_i: &Array2<S>,
) -> (Array2<S>, Vec<Array2<S>>) {
    let config = &params.config;
    assert_eq!(config.merger, MergerKind::Attentive, "merge is attentive-only");
    assert_eq!(e_i.dim(), (config.m, config.d), "token embeddings are m×d");
    assert_eq!(s_i.dim(), (1, config.d), "summary is 1×d");
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let e = g.constant(e_i.clone());
    let s = g.constant(s_i.clone());
    let e_tilde = g.add(e, leaves.digit_pos);
    let q_flat = linear(&mut g, s, leaves.atm_fq.w, leaves.atm_fq.b);
    let q = g.reshape(q_flat, config.k, config.d);
    let (z, wts) = atm_step(&mut g, &leaves, config, q, e_tilde);
    (
        g.value(z).clone(),
        wts.iter().map(|&w| g.value(w).clone()).collect(),
    )
}

/// Merger attention weights for a single item, one k×m matrix per head.
pub fn atm_attention_weights<S: Scalar>(
    params: &ModelParams<S>,
    codes: ArrayView1<u16>,
) -> Result<Vec<Array2<S>>, ModelError> {
    let codes2 = codes
        .to_owned()
        .into_shape_with_order((1, codes.len()))
        .expect("row reshape");
    let fwd = forward_sequence(params, codes2.view())?;
    Ok(fwd.atm_weights[0]
        .iter()
        .map(|&w| fwd.graph.value(w).clone())
        .collect())
}

/// Normalized per-digit subspace queries for intent rows (n×d each).
pub fn project_intent_to_subspaces<S: Scalar>(
    params: &ModelParams<S>,
    intent: &Array2<S>,
) -> Vec<Array2<S>> {
    assert_eq!(intent.ncols(), params.config.d);
    let mut g = Graph::new();
    let leaves = attach_leaves(&mut g, params);
    let h = g.constant(intent.clone());
    build_subspace_queries(&mut g, &leaves, h)
        .into_iter()
        .map(|id| g.value(id).clone())
        .collect()
}

// --- Checkpoint ---------------------------------------------------------------

/// Checkpoint: one JSON config line, then for each tensor a u32-length name,
/// u64 rows, u64 cols, and the f32 little-endian payload in canonical order.
pub fn write_checkpoint<W: Write, S: Scalar>(
    mut w: W,
    params: &ModelParams<S>,
) -> Result<(), ModelError> {
    let mut header = serde_json::to_string(&params.config)?;
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut result: Result<(), ModelError> = Ok(());
    params.tensors.for_each(&mut |name, t: &P<S>| {
        if result.is_err() {
            return;
        }
        result = (|| {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u64::<LittleEndian>(t.nrows() as u64)?;
            w.write_u64::<LittleEndian>(t.ncols() as u64)?;
            for &v in t.iter() {
                w.write_f32::<LittleEndian>(v.to_f32c())?;
            }
            Ok(())
        })();
    });
    result
}

pub fn read_checkpoint<R: BufRead, S: Scalar>(mut r: R) -> Result<ModelParams<S>, ModelError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let config: ModelConfig = serde_json::from_str(line.trim_end())
        .map_err(|e| ModelError::BadCheckpoint(format!("config header: {e}")))?;
    config.validate()?;
    let mut loaded: HashMap<String, Array2<S>> = HashMap::new();
    loop {
        let name_len = match r.read_u32::<LittleEndian>() {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ModelError::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let mut buf = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        let arr = Array2::from_shape_vec(
            (rows, cols),
            buf.into_iter().map(S::from_f32c).collect(),
        )
        .unwrap();
        if loaded.insert(name.clone(), arr).is_some() {
            return Err(ModelError::BadCheckpoint(format!("duplicate tensor {name}")));
        }
    }
    let mut params = ModelParams::<S>::zeros(&config)?;
    let mut err: Option<ModelError> = None;
    params.tensors.for_each_mut(&mut |name, t: &mut P<S>| {
        if err.is_some() {
            return;
        }
        match loaded.remove(name) {
            Some(arr) if arr.dim() == t.dim() => *t = Arc::new(arr),
            Some(arr) => {
                err = Some(ModelError::BadCheckpoint(format!(
                    "tensor {name}: shape {:?} does not match expected {:?}",
                    arr.dim(),
                    t.dim()
                )))
            }
            None => err = Some(ModelError::BadCheckpoint(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(ModelError::BadCheckpoint(format!("unexpected tensor {extra}")));
    }
    Ok(params)
}
