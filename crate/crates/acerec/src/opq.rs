//! Optimized product quantization: an orthogonal rotation plus m per-subspace
//! codebooks, fit by alternating per-block k-means with an orthogonal
//! Procrustes rotation update. Encoding an item yields its semantic ID, a
//! tuple of m discrete codes.
//!
//! All fitting runs in f64. The codebook file stores f32, so the recorded
//! rotation is orthogonal to f32 precision only; the strict 1e-6 invariant
//! holds for fitted sets, and loading applies a looser corruption guard.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use crate::data::ItemEmbeddingMatrix;

/// Largest codebook size representable by the u16 codes file.
pub const MAX_CODEBOOK_SIZE: usize = 1 << 16;

const LLOYD_ITERS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum OpqError {
    #[error("codebook size {m_size} exceeds item count {items}")]
    TooFewItems { items: usize, m_size: usize },
    #[error("bad quantizer parameters: {0}")]
    BadParams(String),
    #[error("embedding dim {got} does not match codebook dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("code {code} out of range for codebook size {m_size} (item {item}, digit {digit})")]
    CodeOutOfRange {
        item: usize,
        digit: usize,
        code: usize,
        m_size: usize,
    },
    #[error("bad codebook file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Learned quantizer: rotation over the (zero-padded) embedding space and one
/// M×sub_dim codebook per subspace.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    /// padded_dim × padded_dim, orthogonal.
    pub rotation: Array2<f64>,
    /// m codebooks, each M × sub_dim.
    pub codebooks: Vec<Array2<f64>>,
    /// Original embedding dim before padding.
    pub dim: usize,
    /// Zero columns appended so padded_dim = m · sub_dim.
    pub padding: usize,
    pub seed: u64,
}

impl CodebookSet {
    pub fn m(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].nrows()
    }

    pub fn sub_dim(&self) -> usize {
        self.codebooks[0].ncols()
    }

    pub fn padded_dim(&self) -> usize {
        self.dim + self.padding
    }

    /// ‖RᵀR − I‖_F
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.rotation.nrows();
        let mut prod = self.rotation.t().dot(&self.rotation);
        for i in 0..d {
            prod[[i, i]] -= 1.0;
        }
        prod.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-item semantic IDs: row r holds the m codes of dense item r.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticIdTable {
    pub codes: Array2<u16>,
}

impl SemanticIdTable {
    pub fn n_items(&self) -> usize {
        self.codes.nrows()
    }

    pub fn m(&self) -> usize {
        self.codes.ncols()
    }

    pub fn code(&self, item: usize, digit: usize) -> usize {
        self.codes[[item, digit]] as usize
    }

    /// Code rows for a list of items (repeats allowed), in the given order.
    pub fn codes_for(&self, items: &[usize]) -> Array2<u16> {
        let mut out = Array2::zeros((items.len(), self.m()));
        for (r, &item) in items.iter().enumerate() {
            out.row_mut(r).assign(&self.codes.row(item));
        }
        out
    }
}

/// Fit result: the quantizer plus per-outer-iteration diagnostics.
#[derive(Debug, Clone)]
pub struct OpqFit {
    pub codebooks: CodebookSet,
    /// Quantization error after each outer iteration (re-encoded).
    pub error_trace: Vec<f64>,
    /// ‖RᵀR − I‖_F after each rotation update.
    pub orthogonality_trace: Vec<f64>,
}

/// Fit with the full alternation (k-means ⇄ Procrustes rotation).
pub fn fit_opq(
    x: &ItemEmbeddingMatrix,
    m: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
) -> Result<OpqFit, OpqError> {
    fit_impl(x, m, codebook_size, iters, seed, true)
}

/// Plain product quantization: same schedule with the rotation frozen at
/// identity. Kept for ablations against the rotated fit.
pub fn fit_pq(
    x: &ItemEmbeddingMatrix,
    m: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
) -> Result<OpqFit, OpqError> {
    fit_impl(x, m, codebook_size, iters, seed, false)
}

fn fit_impl(
    x: &ItemEmbeddingMatrix,
    m: usize,
    codebook_size: usize,
    iters: usize,
    seed: u64,
    update_rotation: bool,
) -> Result<OpqFit, OpqError> {
    let n = x.n_items();
    let dim = x.dim();
    if m == 0 || iters == 0 || codebook_size == 0 {
        return Err(OpqError::BadParams(
            "m, codebook size, and iters must be positive".into(),
        ));
    }
    if codebook_size > MAX_CODEBOOK_SIZE {
        return Err(OpqError::BadParams(format!(
            "codebook size {codebook_size} exceeds u16 code range"
        )));
    }
    if codebook_size > n {
        return Err(OpqError::TooFewItems {
            items: n,
            m_size: codebook_size,
        });
    }
    let padded = dim.div_ceil(m) * m;
    let sub_dim = padded / m;
    let padding = padded - dim;

    let mut xp = Array2::zeros((n, padded));
    xp.slice_mut(s![.., ..dim]).assign(&x.values);

    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let block_seeds: Vec<u64> = (0..m).map(|_| master.gen()).collect();

    let mut rotation = Array2::eye(padded);
    let mut codebooks: Vec<Array2<f64>> = Vec::new();
    let mut codes: Array2<u16> = Array2::zeros((n, m));
    let mut error_trace = Vec::with_capacity(iters);
    let mut orthogonality_trace = Vec::with_capacity(iters);

    for iter in 0..iters {
        let xrot = xp.dot(&rotation);

        // per-block k-means; blocks are independent, results collected in
        // block order so the outcome does not depend on thread count
        let block_results: Vec<(Array2<f64>, Vec<u16>)> = (0..m)
            .into_par_iter()
            .map(|k| {
                let block = xrot.slice(s![.., k * sub_dim..(k + 1) * sub_dim]);
                let mut rng = ChaCha20Rng::seed_from_u64(block_seeds[k]);
                let init = if iter == 0 {
                    kmeans_pp_init(&block, codebook_size, &mut rng)
                } else {
                    codebooks[k].clone()
                };
                lloyd(&block, init, LLOYD_ITERS)
            })
            .collect();

        codebooks = block_results.iter().map(|(c, _)| c.clone()).collect();
        for (k, (_, assign)) in block_results.iter().enumerate() {
            for (i, &a) in assign.iter().enumerate() {
                codes[[i, k]] = a;
            }
        }

        if update_rotation {
            let xhat_rot = assemble_rotated_reconstruction(&codes, &codebooks, sub_dim);
            let a = xp.t().dot(&xhat_rot);
            rotation = procrustes_rotation(&a);
        }

        let cb = CodebookSet {
            rotation: rotation.clone(),
            codebooks: codebooks.clone(),
            dim,
            padding,
            seed,
        };
        let err = quantization_error(x, &cb)?;
        log::info!("opq iter {iter}: quantization error {err:.6e}");
        error_trace.push(err);
        orthogonality_trace.push(cb.orthogonality_defect());
    }

    Ok(OpqFit {
        codebooks: CodebookSet {
            rotation,
            codebooks,
            dim,
            padding,
            seed,
        },
        error_trace,
        orthogonality_trace,
    })
}

fn assemble_rotated_reconstruction(
    codes: &Array2<u16>,
    codebooks: &[Array2<f64>],
    sub_dim: usize,
) -> Array2<f64> {
    let n = codes.nrows();
    let m = codes.ncols();
    let mut out = Array2::zeros((n, m * sub_dim));
    for i in 0..n {
        for k in 0..m {
            let c = codes[[i, k]] as usize;
            out.slice_mut(s![i, k * sub_dim..(k + 1) * sub_dim])
                .assign(&codebooks[k].row(c));
        }
    }
    out
}

/// Assign every item to its nearest centroid per subspace. Ties break to the
/// lowest code.
pub fn encode_items(
    x: &ItemEmbeddingMatrix,
    cb: &CodebookSet,
) -> Result<SemanticIdTable, OpqError> {
    if x.dim() != cb.dim {
        return Err(OpqError::DimMismatch {
            expected: cb.dim,
            got: x.dim(),
        });
    }
    let n = x.n_items();
    let padded = cb.padded_dim();
    let sub_dim = cb.sub_dim();
    let m = cb.m();

    let mut xp = Array2::zeros((n, padded));
    xp.slice_mut(s![.., ..cb.dim]).assign(&x.values);
    let xrot = xp.dot(&cb.rotation);

    let mut codes: Array2<u16> = Array2::zeros((n, m));
    codes
        .axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for k in 0..m {
                let point = xrot.slice(s![i, k * sub_dim..(k + 1) * sub_dim]);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in cb.codebooks[k].rows().into_iter().enumerate() {
                    let d = sq_dist(&point, &centroid);
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                row[k] = best as u16;
            }
        });
    Ok(SemanticIdTable { codes })
}

/// Concatenate selected centroids, undo the rotation (transpose), strip
/// padding.
pub fn reconstruct(
    codes: &SemanticIdTable,
    cb: &CodebookSet,
) -> Result<ItemEmbeddingMatrix, OpqError> {
    let m = cb.m();
    if codes.m() != m {
        return Err(OpqError::DimMismatch {
            expected: m,
            got: codes.m(),
        });
    }
    let m_size = cb.codebook_size();
    for i in 0..codes.n_items() {
        for k in 0..m {
            let c = codes.code(i, k);
            if c >= m_size {
                return Err(OpqError::CodeOutOfRange {
                    item: i,
                    digit: k,
                    code: c,
                    m_size,
                });
            }
        }
    }
    let xhat_rot = assemble_rotated_reconstruction(&codes.codes, &cb.codebooks, cb.sub_dim());
    let xhat = xhat_rot.dot(&cb.rotation.t());
    Ok(ItemEmbeddingMatrix {
        values: xhat.slice(s![.., ..cb.dim]).to_owned(),
    })
}

/// Mean squared reconstruction error: ‖X − X̂‖²_F / |I|.
pub fn quantization_error(x: &ItemEmbeddingMatrix, cb: &CodebookSet) -> Result<f64, OpqError> {
    let codes = encode_items(x, cb)?;
    let xhat = reconstruct(&codes, cb)?;
    let diff = &x.values - &xhat.values;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / x.n_items() as f64)
}

/// Number of item pairs sharing an identical full code tuple. Collisions are
/// legal; holistic scoring ties such items.
pub fn code_collisions(codes: &SemanticIdTable) -> usize {
    let mut counts: HashMap<Vec<u16>, usize> = HashMap::new();
    for row in codes.codes.rows() {
        *counts.entry(row.to_vec()).or_insert(0) += 1;
    }
    counts.values().map(|&c| c * (c - 1) / 2).sum()
}

fn sq_dist(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// k-means++ seeding: first centroid uniform, the rest weighted by squared
/// distance to the nearest chosen centroid.
fn kmeans_pp_init(points: &ArrayView2<f64>, k: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut centroids = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points.row(i), &centroids.row(0)))
        .collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(d2.iter().cloned()) {
            Ok(w) => w.sample(rng),
            // all residual distances zero: duplicate-heavy data
            Err(_) => rng.gen_range(0..n),
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for i in 0..n {
            let nd = sq_dist(&points.row(i), &centroids.row(j));
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }
    centroids
}

/// Lloyd iterations from the given centroids; empty clusters are re-seeded
/// from the point currently farthest from its assigned centroid. Returns the
/// final centroids and a fresh assignment under them.
fn lloyd(
    points: &ArrayView2<f64>,
    mut centroids: Array2<f64>,
    iters: usize,
) -> (Array2<f64>, Vec<u16>) {
    let n = points.nrows();
    let d = points.ncols();
    let k = centroids.nrows();
    let mut assign = vec![0u16; n];
    let mut dist = vec![0f64; n];

    let assign_pass =
        |centroids: &Array2<f64>, assign: &mut Vec<u16>, dist: &mut Vec<f64>| {
            for i in 0..n {
                let p = points.row(i);
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (c, centroid) in centroids.rows().into_iter().enumerate() {
                    let dd = sq_dist(&p, &centroid);
                    if dd < best_d {
                        best_d = dd;
                        best = c;
                    }
                }
                assign[i] = best as u16;
                dist[i] = best_d;
            }
        };

    for _ in 0..iters {
        assign_pass(&centroids, &mut assign, &mut dist);
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; n.min(k).max(k)];
        for i in 0..n {
            let c = assign[i] as usize;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids.row_mut(c).assign(&sums.row(c).mapv(|v| v * inv));
            }
        }
        // re-seed empty clusters from the farthest points, one each
        let mut claimed: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|i| !claimed.contains(i))
                .max_by(|&a, &b| {
                    dist[a]
                        .partial_cmp(&dist[b])
                        .unwrap()
                        .then(b.cmp(&a)) // tie: lowest index
                })
                .unwrap_or(0);
            centroids.row_mut(c).assign(&points.row(far));
            claimed.push(far);
        }
    }
    assign_pass(&centroids, &mut assign, &mut dist);
    (centroids, assign)
}

// --- Procrustes via symmetric Jacobi ---------------------------------------

/// Orthogonal matrix R maximizing tr(Rᵀ·A), i.e. R = U·Vᵀ from A = U·Σ·Vᵀ.
/// Rank-deficient directions are completed to a full orthonormal basis, which
/// leaves the objective unchanged.
fn procrustes_rotation(a: &Array2<f64>) -> Array2<f64> {
    let d = a.nrows();
    assert_eq!(a.ncols(), d, "procrustes expects square input");
    let b = a.t().dot(a);
    let (mut eigvals, mut v) = jacobi_eigh(&b);

    // order by descending eigenvalue, stable on ties
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap().then(i.cmp(&j)));
    let vs = v.clone();
    let evs = eigvals.clone();
    for (new, &old) in order.iter().enumerate() {
        eigvals[new] = evs[old];
        v.column_mut(new).assign(&vs.column(old));
    }

    let sigma_max = eigvals[0].max(0.0).sqrt();
    let tol = sigma_max * 1e-12 + f64::MIN_POSITIVE;
    let mut u = Array2::<f64>::zeros((d, d));
    let mut have: Vec<bool> = vec![false; d];
    for j in 0..d {
        let sigma = eigvals[j].max(0.0).sqrt();
        if sigma > tol {
            let col = a.dot(&v.column(j).to_owned()).mapv(|x| x / sigma);
            u.column_mut(j).assign(&col);
            have[j] = true;
        }
    }
    // modified Gram-Schmidt keeps U orthonormal even with clustered σ;
    // deficient columns are completed from the best-aligned basis vector
    for j in 0..d {
        if have[j] {
            let mut col = u.column(j).to_owned();
            for p in 0..j {
                let proj = u.column(p).dot(&col);
                col = col - proj * &u.column(p).to_owned();
            }
            let norm = col.dot(&col).sqrt();
            if norm > 1e-8 {
                u.column_mut(j).assign(&col.mapv(|x| x / norm));
                continue;
            }
            have[j] = false;
        }
        if !have[j] {
            let col = complete_column(&u, j);
            u.column_mut(j).assign(&col);
            have[j] = true;
        }
    }
    u.dot(&v.t())
}

/// Standard-basis vector with the largest residual against columns 0..j of
/// `u`, orthonormalized. Ties break to the lowest basis index.
fn complete_column(u: &Array2<f64>, j: usize) -> Array1<f64> {
    let d = u.nrows();
    let mut best: Option<(f64, Array1<f64>)> = None;
    for e in 0..d {
        let mut col = Array1::<f64>::zeros(d);
        col[e] = 1.0;
        for p in 0..j {
            let proj = u.column(p).dot(&col);
            col = col - proj * &u.column(p).to_owned();
        }
        let norm2 = col.dot(&col);
        if best.as_ref().map_or(true, |(b, _)| norm2 > *b) {
            best = Some((norm2, col));
        }
    }
    let (norm2, col) = best.unwrap();
    assert!(norm2 > 1e-12, "cannot complete orthonormal basis");
    col.mapv(|x| x / norm2.sqrt())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns).
fn jacobi_eigh(sym: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = sym.nrows();
    assert_eq!(sym.ncols(), d);
    let mut a = sym.clone();
    let mut v = Array2::<f64>::eye(d);
    let frob = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let stop = (frob * 1e-14).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if (2.0 * off).sqrt() < stop {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[[p, q]];
                if apq.abs() < stop / (d as f64) {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[[i, p]];
                    let aiq = a[[i, q]];
                    a[[i, p]] = c * aip - s * aiq;
                    a[[i, q]] = s * aip + c * aiq;
                }
                for i in 0..d {
                    let api = a[[p, i]];
                    let aqi = a[[q, i]];
                    a[[p, i]] = c * api - s * aqi;
                    a[[q, i]] = s * api + c * aqi;
                }
                for i in 0..d {
                    let vip = v[[i, p]];
                    let viq = v[[i, q]];
                    v[[i, p]] = c * vip - s * viq;
                    v[[i, q]] = s * vip + c * viq;
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a[[i, i]]).collect();
    (eigvals, v)
}

// --- File formats -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    m: usize,
    #[serde(rename = "M")]
    codebook_size: usize,
    #[serde(rename = "D")]
    dim: usize,
    sub_dim: usize,
    padding: usize,
    seed: u64,
}

/// Codebook file: one compact JSON header line, then the rotation and the m
/// codebooks as row-major f32 little-endian.
pub fn write_codebooks<W: Write>(mut w: W, cb: &CodebookSet) -> Result<(), OpqError> {
    let header = CodebookHeader {
        m: cb.m(),
        codebook_size: cb.codebook_size(),
        dim: cb.dim,
        sub_dim: cb.sub_dim(),
        padding: cb.padding,
        seed: cb.seed,
    };
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    for &x in cb.rotation.iter() {
        w.write_f32::<LittleEndian>(x as f32)?;
    }
    for book in &cb.codebooks {
        for &x in book.iter() {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
    }
    Ok(())
}

pub fn read_codebooks<R: BufRead>(mut r: R) -> Result<CodebookSet, OpqError> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CodebookHeader = serde_json::from_str(line.trim_end())?;
    if header.m == 0
        || header.codebook_size == 0
        || header.codebook_size > MAX_CODEBOOK_SIZE
        || header.m * header.sub_dim != header.dim + header.padding
    {
        return Err(OpqError::BadFile(format!(
            "inconsistent header: m={} M={} D={} sub_dim={} padding={}",
            header.m, header.codebook_size, header.dim, header.sub_dim, header.padding
        )));
    }
    let padded = header.dim + header.padding;
    let mut read_matrix = |rows: usize, cols: usize| -> Result<Array2<f64>, OpqError> {
        let mut buf = vec![0f32; rows * cols];
        r.read_f32_into::<LittleEndian>(&mut buf)?;
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(OpqError::BadFile("non-finite value in payload".into()));
        }
        Ok(Array2::from_shape_vec((rows, cols), buf.into_iter().map(f64::from).collect()).unwrap())
    };
    let rotation = read_matrix(padded, padded)?;
    let mut codebooks = Vec::with_capacity(header.m);
    for _ in 0..header.m {
        codebooks.push(read_matrix(header.codebook_size, header.sub_dim)?);
    }
    let cb = CodebookSet {
        rotation,
        codebooks,
        dim: header.dim,
        padding: header.padding,
        seed: header.seed,
    };
    // f32 storage limits reload precision; this is a corruption guard, not
    // the fit-time 1e-6 invariant
    let defect = cb.orthogonality_defect();
    if defect > 1e-4 {
        return Err(OpqError::BadFile(format!(
            "stored rotation is not orthogonal (defect {defect:.3e})"
        )));
    }
    Ok(cb)
}

/// Codes file: |I|×m u16 little-endian, row-major, no header.
pub fn write_codes<W: Write>(mut w: W, codes: &SemanticIdTable) -> Result<(), OpqError> {
    for &c in codes.codes.iter() {
        w.write_u16::<LittleEndian>(c)?;
    }
    Ok(())
}

pub fn read_codes<R: Read>(
    mut r: R,
    n_items: usize,
    m: usize,
    codebook_size: usize,
) -> Result<SemanticIdTable, OpqError> {
    let mut buf = vec![0u16; n_items * m];
    r.read_u16_into::<LittleEndian>(&mut buf)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(OpqError::BadFile("codes file longer than |I|×m".into()));
    }
    let codes = Array2::from_shape_vec((n_items, m), buf).unwrap();
    if let Some(&bad) = codes.iter().find(|&&c| (c as usize) >= codebook_size) {
        return Err(OpqError::BadFile(format!(
            "code {bad} out of range for codebook size {codebook_size}"
        )));
    }
    Ok(SemanticIdTable { codes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn emb(values: Array2<f64>) -> ItemEmbeddingMatrix {
        ItemEmbeddingMatrix { values }
    }

    /// Block-clustered data: per block, points sit near one of `centers`
    /// well-separated centers. Returns (matrix, per-block planted labels).
    fn planted(
        n: usize,
        m: usize,
        sub_dim: usize,
        centers: usize,
        noise: f64,
        seed: u64,
    ) -> (ItemEmbeddingMatrix, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).unwrap();
        let mut x = Array2::zeros((n, m * sub_dim));
        let mut labels = vec![vec![0usize; n]; m];
        for i in 0..n {
            for k in 0..m {
                let c = rng.gen_range(0..centers);
                labels[k][i] = c;
                for j in 0..sub_dim {
                    let base = if j == 0 { 10.0 * c as f64 } else { 0.0 };
                    x[[i, k * sub_dim + j]] = base + normal.sample(&mut rng);
                }
            }
        }
        (emb(x), labels)
    }

    /// Random orthogonal matrix from Gram-Schmidt of a Gaussian draw.
    fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((d, d), |_| rng.gen_range(-1.0..1.0f64));
        procrustes_rotation(&g)
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // A = Q·diag(λ)·Qᵀ
        let d = 6;
        let q = random_rotation(d, 3);
        let lam = [9.0, 5.0, 4.0, 1.0, 0.5, 0.0];
        let mut diag = Array2::zeros((d, d));
        for i in 0..d {
            diag[[i, i]] = lam[i];
        }
        let a = q.dot(&diag).dot(&q.t());
        let (mut vals, v) = jacobi_eigh(&a);
        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (got, want) in vals.iter().zip(lam.iter()) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        // eigenvectors orthonormal
        let vtv = v.t().dot(&v);
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-10);
            }
        }
        // reconstruction
        let (vals2, v2) = jacobi_eigh(&a);
        let mut lam2 = Array2::zeros((d, d));
        for i in 0..d {
            lam2[[i, i]] = vals2[i];
        }
        let back = v2.dot(&lam2).dot(&v2.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn procrustes_recovers_exact_rotation() {
        // A = Rᵀ (orthogonal): maximizer of tr(RᵀA) is A itself
        let r = random_rotation(8, 11);
        let got = procrustes_rotation(&r);
        for (x, y) in got.iter().zip(r.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn procrustes_output_is_orthogonal_even_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [3usize, 6, 10] {
            // rank-1 matrix
            let u = Array2::from_shape_fn((d, 1), |_| rng.gen_range(-1.0..1.0f64));
            let v = Array2::from_shape_fn((1, d), |_| rng.gen_range(-1.0..1.0f64));
            let a = u.dot(&v);
            let r = procrustes_rotation(&a);
            let mut defect = r.t().dot(&r);
            for i in 0..d {
                defect[[i, i]] -= 1.0;
            }
            let f = defect.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(f < 1e-10, "d={d} defect {f}");
        }
        // the zero matrix is the extreme case
        let r = procrustes_rotation(&Array2::zeros((4, 4)));
        let mut defect = r.t().dot(&r);
        for i in 0..4 {
            defect[[i, i]] -= 1.0;
        }
        assert!(defect.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-10);
    }

    #[test]
    fn single_centroid_is_block_mean() {
        let (x, _) = planted(20, 2, 3, 2, 0.3, 1);
        let fit = fit_opq(&x, 2, 1, 1, 9).unwrap();
        let codes = encode_items(&x, &fit.codebooks).unwrap();
        assert!(codes.codes.iter().all(|&c| c == 0));
        // codebooks were computed under the identity rotation of iteration 0
        for k in 0..2 {
            let block = x.values.slice(s![.., k * 3..(k + 1) * 3]);
            let mean = block.mean_axis(ndarray::Axis(0)).unwrap();
            for j in 0..3 {
                assert!((fit.codebooks.codebooks[k][[0, j]] - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn planted_blocks_recovered_up_to_label_permutation() {
        let (x, labels) = planted(60, 2, 2, 2, 0.2, 4);
        let fit = fit_opq(&x, 2, 2, 5, 42).unwrap();
        let codes = encode_items(&x, &fit.codebooks).unwrap();
        for k in 0..2 {
            // grouping must match planted labels exactly, up to swapping 0/1
            let direct = (0..60).all(|i| codes.code(i, k) == labels[k][i]);
            let flipped = (0..60).all(|i| codes.code(i, k) == 1 - labels[k][i]);
            assert!(direct || flipped, "block {k} failed to recover clusters");
        }
    }

    #[test]
    fn error_trace_is_monotone_and_rotation_orthogonal() {
        let (x, _) = planted(80, 4, 3, 3, 0.4, 8);
        let fit = fit_opq(&x, 4, 3, 20, 13).unwrap();
        assert_eq!(fit.error_trace.len(), 20);
        for w in fit.error_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "error increased: {} -> {}", w[0], w[1]);
        }
        for &defect in &fit.orthogonality_trace {
            assert!(defect < 1e-6, "orthogonality defect {defect}");
        }
    }

    #[test]
    fn encode_matches_brute_force_scan() {
        let (x, _) = planted(50, 2, 3, 3, 1.0, 21);
        let fit = fit_opq(&x, 2, 4, 3, 77).unwrap();
        let cb = &fit.codebooks;
        let codes = encode_items(&x, cb).unwrap();
        // reference: padding, rotation, exhaustive nearest-centroid scan
        let padded = cb.padded_dim();
        let mut xp = Array2::zeros((50, padded));
        xp.slice_mut(s![.., ..cb.dim]).assign(&x.values);
        let xrot = xp.dot(&cb.rotation);
        for i in 0..50 {
            for k in 0..cb.m() {
                let p = xrot.slice(s![i, k * cb.sub_dim()..(k + 1) * cb.sub_dim()]);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..cb.codebook_size() {
                    let d = sq_dist(&p, &cb.codebooks[k].row(c));
                    if d < best_d {
                        best_d = d;
                        best = c;
                    }
                }
                assert_eq!(codes.code(i, k), best, "item {i} digit {k}");
            }
        }
    }

    #[test]
    fn encode_tie_breaks_to_lowest_code() {
        // centroids at 0 and 1 in each(single) subspace; point at 0.5
        let cb = CodebookSet {
            rotation: Array2::eye(1),
            codebooks: vec![arr2(&[[0.0], [1.0]])],
            dim: 1,
            padding: 0,
            seed: 0,
        };
        let x = emb(arr2(&[[0.5]]));
        let codes = encode_items(&x, &cb).unwrap();
        assert_eq!(codes.code(0, 0), 0);
    }

    #[test]
    fn exact_centroid_gets_its_own_code() {
        let cb = CodebookSet {
            rotation: Array2::eye(4),
            codebooks: vec![arr2(&[[0.0, 0.0], [3.0, 1.0]]), arr2(&[[1.0, 1.0], [-2.0, 0.5]])],
            dim: 4,
            padding: 0,
            seed: 0,
        };
        let x = emb(arr2(&[[3.0, 1.0, -2.0, 0.5]]));
        let codes = encode_items(&x, &cb).unwrap();
        assert_eq!(codes.code(0, 0), 1);
        assert_eq!(codes.code(0, 1), 1);
    }

    #[test]
    fn reconstruct_identity_rotation_is_centroid_concatenation() {
        let cb = CodebookSet {
            rotation: Array2::eye(4),
            codebooks: vec![arr2(&[[0.0, 0.0], [3.0, 1.0]]), arr2(&[[1.0, 1.0], [-2.0, 0.5]])],
            dim: 4,
            padding: 0,
            seed: 0,
        };
        let codes = SemanticIdTable {
            codes: arr2(&[[1u16, 0]]),
        };
        let xhat = reconstruct(&codes, &cb).unwrap();
        assert_eq!(xhat.values, arr2(&[[3.0, 1.0, 1.0, 1.0]]));
    }

    #[test]
    fn coding_is_idempotent() {
        let (x, _) = planted(40, 2, 3, 2, 0.8, 30);
        let fit = fit_opq(&x, 2, 3, 4, 5).unwrap();
        let codes = encode_items(&x, &fit.codebooks).unwrap();
        let xhat = reconstruct(&codes, &fit.codebooks).unwrap();
        let codes2 = encode_items(&xhat, &fit.codebooks).unwrap();
        assert_eq!(codes, codes2);
    }

    #[test]
    fn full_size_codebook_reaches_zero_error() {
        // 8 well-separated items, M = |I|: every item becomes its own centroid
        let (x, _) = planted(8, 2, 2, 8, 0.0, 14);
        let fit = fit_opq(&x, 2, 8, 30, 3).unwrap();
        let err = quantization_error(&x, &fit.codebooks).unwrap();
        let frob = err * 8.0;
        assert!(frob.sqrt() < 1e-6, "residual {}", frob.sqrt());
    }

    #[test]
    fn doubling_data_scales_error_by_four_after_refit() {
        let (x, _) = planted(48, 2, 3, 3, 0.5, 17);
        let x2 = emb(&x.values * 2.0);
        let e1 = {
            let fit = fit_opq(&x, 2, 3, 6, 23).unwrap();
            quantization_error(&x, &fit.codebooks).unwrap()
        };
        let e2 = {
            let fit = fit_opq(&x2, 2, 3, 6, 23).unwrap();
            quantization_error(&x2, &fit.codebooks).unwrap()
        };
        // doubling is exact in floating point, so the refit follows the
        // same path and the error scales exactly
        assert!((e2 - 4.0 * e1).abs() <= 1e-9 * e1.max(1.0), "{e2} vs {}", 4.0 * e1);
    }

    #[test]
    fn opq_beats_identity_pq_on_rotated_clusters() {
        // clusters aligned to blocks, then smeared by a random rotation
        let (aligned, _) = planted(120, 4, 2, 4, 0.05, 19);
        let q = random_rotation(8, 99);
        let x = emb(aligned.values.dot(&q));
        let opq = fit_opq(&x, 4, 4, 15, 31).unwrap();
        let pq = fit_pq(&x, 4, 4, 15, 31).unwrap();
        let e_opq = quantization_error(&x, &opq.codebooks).unwrap();
        let e_pq = quantization_error(&x, &pq.codebooks).unwrap();
        assert!(
            e_opq <= e_pq,
            "rotated fit {e_opq} should not lose to identity-rotation fit {e_pq}"
        );
    }

    #[test]
    fn padding_roundtrip_when_dim_not_divisible() {
        // D=5, m=2 → padded to 6
        let (x6, _) = planted(30, 2, 3, 2, 0.3, 40);
        let x = emb(x6.values.slice(s![.., ..5]).to_owned());
        let fit = fit_opq(&x, 2, 2, 4, 8).unwrap();
        assert_eq!(fit.codebooks.padding, 1);
        assert_eq!(fit.codebooks.padded_dim(), 6);
        let codes = encode_items(&x, &fit.codebooks).unwrap();
        let xhat = reconstruct(&codes, &fit.codebooks).unwrap();
        assert_eq!(xhat.dim(), 5);
    }

    #[test]
    fn rejects_codebook_larger_than_catalog() {
        let (x, _) = planted(4, 2, 2, 2, 0.1, 2);
        let err = fit_opq(&x, 2, 5, 1, 0).unwrap_err();
        assert!(matches!(err, OpqError::TooFewItems { items: 4, m_size: 5 }));
    }

    #[test]
    fn collision_count_matches_pair_formula() {
        let codes = SemanticIdTable {
            codes: arr2(&[[0u16, 1], [0, 1], [2, 3], [0, 1], [2, 3]]),
        };
        // {0,1}×3 → 3 pairs; {2,3}×2 → 1 pair
        assert_eq!(code_collisions(&codes), 4);
    }

    #[test]
    fn codebook_file_roundtrip() {
        let (x, _) = planted(30, 2, 3, 2, 0.3, 50);
        let fit = fit_opq(&x, 2, 2, 3, 12).unwrap();
        let mut buf = Vec::new();
        write_codebooks(&mut buf, &fit.codebooks).unwrap();
        let back = read_codebooks(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.dim, fit.codebooks.dim);
        assert_eq!(back.padding, fit.codebooks.padding);
        assert_eq!(back.seed, fit.codebooks.seed);
        assert_eq!(back.m(), fit.codebooks.m());
        // values survive at f32 precision
        for (a, b) in back.rotation.iter().zip(fit.codebooks.rotation.iter()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        for (ba, bb) in back.codebooks.iter().zip(fit.codebooks.codebooks.iter()) {
            for (a, b) in ba.iter().zip(bb.iter()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }

    #[test]
    fn codebook_file_rejects_garbage() {
        let junk = b"{\"m\":2,\"M\":2,\"D\":4,\"sub_dim\":3,\"padding\":0,\"seed\":1}\n";
        let err = read_codebooks(std::io::Cursor::new(&junk[..])).unwrap_err();
        assert!(matches!(err, OpqError::BadFile(_)), "{err}");
    }

    #[test]
    fn codes_file_roundtrip_and_validation() {
        let codes = SemanticIdTable {
            codes: arr2(&[[0u16, 3], [2, 1]]),
        };
        let mut buf = Vec::new();
        write_codes(&mut buf, &codes).unwrap();
        assert_eq!(buf.len(), 2 * 2 * 2);
        let back = read_codes(std::io::Cursor::new(&buf), 2, 2, 4).unwrap();
        assert_eq!(back, codes);
        let err = read_codes(std::io::Cursor::new(&buf), 2, 2, 3).unwrap_err();
        assert!(matches!(err, OpqError::BadFile(_)));
        let err = read_codes(std::io::Cursor::new(&buf), 1, 2, 4).unwrap_err();
        assert!(matches!(err, OpqError::BadFile(_)), "trailing bytes");
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, _) = planted(60, 2, 3, 3, 0.4, 60);
        let a = fit_opq(&x, 2, 3, 5, 7).unwrap();
        let b = fit_opq(&x, 2, 3, 5, 7).unwrap();
        assert_eq!(a.codebooks.rotation, b.codebooks.rotation);
        for (ca, cb) in a.codebooks.codebooks.iter().zip(b.codebooks.codebooks.iter()) {
            assert_eq!(ca, cb);
        }
        assert_eq!(a.error_trace, b.error_trace);
    }
}
