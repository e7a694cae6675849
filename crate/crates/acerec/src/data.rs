//! Interaction-log ingestion, preprocessing, and synthetic corpora.
//!
//! Raw logs are UTF-8 TSV (`user_id<TAB>item_id<TAB>timestamp`, `#` comment
//! lines skipped). Preprocessing applies an iterative k-core filter to both
//! users and items, then a chronological leave-last-out split: per user the
//! last interaction is the test target, the second-to-last the validation
//! target, and the train sequence keeps the most recent `max_seq_len` of the
//! rest. Item embeddings arrive in a small self-describing binary format.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Read, Write};

/// Magic bytes opening an item-embedding file.
pub const EMBED_MAGIC: &[u8; 8] = b"ACEMB001";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("interaction log is empty after k-core filtering (min_count {min_count})")]
    EmptyAfterFilter { min_count: usize },
    #[error("user {user} has {len} interactions, need at least 3 to split")]
    TooFewInteractions { user: String, len: usize },
    #[error("duplicate item id {0}")]
    DuplicateItem(String),
    #[error("missing embedding for item {0}")]
    MissingEmbedding(String),
    #[error("embedding for item {0} is all zeros")]
    ZeroEmbedding(String),
    #[error("embedding for item {0} contains a non-finite value")]
    NonFiniteEmbedding(String),
    #[error("bad embedding file: {0}")]
    BadEmbeddingFile(String),
    #[error("bad synthetic corpus parameters: {0}")]
    BadSynthParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One row of the interaction log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// Bijection between item ids and dense indices in `[0, |I|)`.
#[derive(Debug, Clone)]
pub struct ItemIndex {
    ids: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl ItemIndex {
    pub fn from_ids(ids: Vec<String>) -> Result<Self, DataError> {
        let mut lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if lookup.insert(id.clone(), i).is_some() {
                return Err(DataError::DuplicateItem(id.clone()));
            }
        }
        Ok(ItemIndex { ids, lookup })
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-user outcome of the leave-last-out split. Indices are dense item
/// indices; `train` is chronological, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub val: usize,
    pub test: usize,
}

/// Split corpus plus the item catalog, persisted as the split manifest JSON.
/// `items[i]` is the id of dense index `i`; user iteration order is first
/// appearance in the source log and is preserved by the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub max_seq_len: usize,
    pub items: Vec<String>,
    pub users: IndexMap<String, UserSplit>,
}

impl SplitDataset {
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_index(&self) -> Result<ItemIndex, DataError> {
        ItemIndex::from_ids(self.items.clone())
    }

    pub fn to_json_writer<W: Write>(&self, w: W) -> Result<(), DataError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn from_json_reader<R: Read>(r: R) -> Result<Self, DataError> {
        let ds: SplitDataset = serde_json::from_reader(r)?;
        for (user, split) in &ds.users {
            let bad = split
                .train
                .iter()
                .chain([&split.val, &split.test])
                .any(|&i| i >= ds.items.len());
            if bad {
                return Err(DataError::Parse {
                    line: 0,
                    msg: format!("split manifest: user {user} references an item index out of range"),
                });
            }
        }
        Ok(ds)
    }
}

/// Dense item-embedding matrix; row `r` belongs to dense index `r`.
#[derive(Debug, Clone)]
pub struct ItemEmbeddingMatrix {
    pub values: Array2<f64>,
}

impl ItemEmbeddingMatrix {
    pub fn n_items(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Parse a TSV interaction log. `#` comment lines and blank lines are
/// skipped; anything else malformed is an error naming the 1-based line.
pub fn parse_interactions<R: BufRead>(source: R) -> Result<Vec<Interaction>, DataError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let (user_id, item_id, ts) = (fields[0], fields[1], fields[2]);
        if user_id.is_empty() || item_id.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: "empty user_id or item_id".into(),
            });
        }
        let timestamp: i64 = ts.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("unparseable timestamp {ts:?}"),
        })?;
        if timestamp < 0 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction {
            user_id: user_id.to_string(),
            item_id: item_id.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

/// Iterative k-core filter with separate user/item thresholds: repeatedly
/// drop users with fewer than `min_user` interactions and items with fewer
/// than `min_item`, until a fixed point. Relative order is preserved.
pub fn kcore_filter_sides(
    interactions: &[Interaction],
    min_user: usize,
    min_item: usize,
) -> Result<Vec<Interaction>, DataError> {
    assert!(min_user >= 1 && min_item >= 1, "k-core thresholds must be >= 1");
    let mut alive: Vec<&Interaction> = interactions.iter().collect();
    loop {
        let mut user_count: HashMap<&str, usize> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for it in &alive {
            *user_count.entry(&it.user_id).or_insert(0) += 1;
            *item_count.entry(&it.item_id).or_insert(0) += 1;
        }
        let kept: Vec<&Interaction> = alive
            .iter()
            .filter(|it| {
                user_count[it.user_id.as_str()] >= min_user
                    && item_count[it.item_id.as_str()] >= min_item
            })
            .copied()
            .collect();
        if kept.len() == alive.len() {
            break;
        }
        alive = kept;
    }
    if alive.is_empty() {
        return Err(DataError::EmptyAfterFilter {
            min_count: min_user.max(min_item),
        });
    }
    Ok(alive.into_iter().cloned().collect())
}

/// k-core with the same threshold on both sides.
pub fn kcore_filter(
    interactions: &[Interaction],
    min_count: usize,
) -> Result<Vec<Interaction>, DataError> {
    kcore_filter_sides(interactions, min_count, min_count)
}

/// Chronological leave-last-out split. Per user, interactions are ordered by
/// (timestamp, file order); the last becomes the test target, the
/// second-to-last the validation target, and the train sequence keeps the
/// most recent `max_seq_len` of the remainder.
pub fn split_leave_last_out(
    interactions: &[Interaction],
    max_seq_len: usize,
) -> Result<SplitDataset, DataError> {
    assert!(max_seq_len >= 1, "max_seq_len must be >= 1");
    let mut items: Vec<String> = Vec::new();
    let mut item_lookup: HashMap<&str, usize> = HashMap::new();
    let mut per_user: IndexMap<&str, Vec<(i64, usize)>> = IndexMap::new();
    for it in interactions {
        let idx = match item_lookup.get(it.item_id.as_str()) {
            Some(&i) => i,
            None => {
                let i = items.len();
                items.push(it.item_id.clone());
                item_lookup.insert(&it.item_id, i);
                i
            }
        };
        per_user
            .entry(it.user_id.as_str())
            .or_default()
            .push((it.timestamp, idx));
    }
    let mut users = IndexMap::with_capacity(per_user.len());
    for (user, mut seq) in per_user {
        if seq.len() < 3 {
            return Err(DataError::TooFewInteractions {
                user: user.to_string(),
                len: seq.len(),
            });
        }
        // stable: equal timestamps keep file order
        seq.sort_by_key(|&(ts, _)| ts);
        let test = seq.pop().unwrap().1;
        let val = seq.pop().unwrap().1;
        let start = seq.len().saturating_sub(max_seq_len);
        let train = seq[start..].iter().map(|&(_, i)| i).collect();
        users.insert(user.to_string(), UserSplit { train, val, test });
    }
    Ok(SplitDataset {
        max_seq_len,
        items,
        users,
    })
}

/// Write embeddings in the binary format: magic, row_count and dim as u64
/// little-endian, then per row a u32 length-prefixed UTF-8 item id followed
/// by `dim` f32 little-endian values.
pub fn write_item_embeddings<W: Write>(
    mut w: W,
    ids: &[String],
    values: &Array2<f64>,
) -> Result<(), DataError> {
    assert_eq!(ids.len(), values.nrows(), "one id per embedding row");
    w.write_all(EMBED_MAGIC)?;
    w.write_u64::<LittleEndian>(values.nrows() as u64)?;
    w.write_u64::<LittleEndian>(values.ncols() as u64)?;
    for (id, row) in ids.iter().zip(values.rows()) {
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id.as_bytes())?;
        for &v in row {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

/// Load embeddings for every item in the catalog, permuting rows into
/// dense-index order. Items absent from the file, duplicate rows, all-zero
/// rows, and non-finite values are errors. Rows for items outside the
/// catalog are ignored.
pub fn load_item_embeddings<R: Read>(
    mut source: R,
    index: &ItemIndex,
) -> Result<ItemEmbeddingMatrix, DataError> {
    let mut magic = [0u8; 8];
    source.read_exact(&mut magic)?;
    if &magic != EMBED_MAGIC {
        return Err(DataError::BadEmbeddingFile("bad magic bytes".into()));
    }
    let rows = source.read_u64::<LittleEndian>()? as usize;
    let dim = source.read_u64::<LittleEndian>()? as usize;
    if dim == 0 {
        return Err(DataError::BadEmbeddingFile("dim is zero".into()));
    }
    let mut values = Array2::zeros((index.len(), dim));
    let mut seen: HashSet<usize> = HashSet::with_capacity(index.len());
    let mut buf = vec![0f32; dim];
    for _ in 0..rows {
        let id_len = source.read_u32::<LittleEndian>()? as usize;
        let mut id_bytes = vec![0u8; id_len];
        source.read_exact(&mut id_bytes)?;
        let id = String::from_utf8(id_bytes)
            .map_err(|_| DataError::BadEmbeddingFile("item id is not UTF-8".into()))?;
        source.read_f32_into::<LittleEndian>(&mut buf)?;
        let Some(dense) = index.get(&id) else { continue };
        if !seen.insert(dense) {
            return Err(DataError::DuplicateItem(id));
        }
        let mut all_zero = true;
        for (j, &v) in buf.iter().enumerate() {
            if !v.is_finite() {
                return Err(DataError::NonFiniteEmbedding(id));
            }
            if v != 0.0 {
                all_zero = false;
            }
            values[[dense, j]] = v as f64;
        }
        if all_zero {
            return Err(DataError::ZeroEmbedding(id));
        }
    }
    if seen.len() != index.len() {
        let missing = (0..index.len())
            .find(|i| !seen.contains(i))
            .map(|i| index.id(i).to_string())
            .unwrap();
        return Err(DataError::MissingEmbedding(missing));
    }
    Ok(ItemEmbeddingMatrix { values })
}

/// Parameters for [`generate_synthetic_corpus`].
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub dim: usize,
    /// Isotropic noise around the cluster centroid.
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_users: 2000,
            n_items: 500,
            n_clusters: 10,
            dim: 16,
            noise_sigma: 0.05,
        }
    }
}

/// Synthetic interaction log plus item embeddings.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub interactions: Vec<Interaction>,
    pub item_ids: Vec<String>,
    pub embeddings: Array2<f64>,
}

/// Generate a clustered corpus: items are assigned round-robin to clusters
/// whose centroids are orthogonal unit vectors; item embeddings add
/// isotropic noise. Each user picks a home cluster and draws 8..=20
/// interactions, 80% uniform within the home cluster and 20% uniform over
/// the whole catalog. Deterministic in the seed.
pub fn generate_synthetic_corpus(
    seed: u64,
    params: &SynthParams,
) -> Result<SyntheticCorpus, DataError> {
    let p = params;
    if p.n_clusters == 0 || p.n_clusters > p.n_items {
        return Err(DataError::BadSynthParams(format!(
            "need 1 <= n_clusters <= n_items, got n_clusters={} n_items={}",
            p.n_clusters, p.n_items
        )));
    }
    if p.dim < p.n_clusters {
        return Err(DataError::BadSynthParams(format!(
            "need dim >= n_clusters, got dim={} n_clusters={}",
            p.dim, p.n_clusters
        )));
    }
    if p.n_users == 0 {
        return Err(DataError::BadSynthParams("n_users must be positive".into()));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite()) {
        return Err(DataError::BadSynthParams(format!(
            "noise_sigma must be finite and >= 0, got {}",
            p.noise_sigma
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let id_width = (p.n_items.max(p.n_users) as f64).log10().ceil() as usize + 1;

    let item_ids: Vec<String> = (0..p.n_items).map(|i| format!("i{i:0id_width$}")).collect();
    let cluster_of = |item: usize| item % p.n_clusters;
    let mut cluster_items: Vec<Vec<usize>> = vec![Vec::new(); p.n_clusters];
    for item in 0..p.n_items {
        cluster_items[cluster_of(item)].push(item);
    }

    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE))
        .expect("valid normal parameters");
    let mut embeddings = Array2::zeros((p.n_items, p.dim));
    for item in 0..p.n_items {
        embeddings[[item, cluster_of(item)]] = 1.0;
        if p.noise_sigma > 0.0 {
            for j in 0..p.dim {
                embeddings[[item, j]] += noise.sample(&mut rng);
            }
        }
    }

    let mut interactions = Vec::new();
    for user in 0..p.n_users {
        let user_id = format!("u{user:0id_width$}");
        let home = rng.gen_range(0..p.n_clusters);
        let len = rng.gen_range(8..=20usize);
        for t in 0..len {
            let item = if rng.gen_bool(0.8) {
                let members = &cluster_items[home];
                members[rng.gen_range(0..members.len())]
            } else {
                rng.gen_range(0..p.n_items)
            };
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: item_ids[item].clone(),
                timestamp: t as i64,
            });
        }
    }

    Ok(SyntheticCorpus {
        interactions,
        item_ids,
        embeddings,
    })
}

/// Render interactions back to the TSV format accepted by
/// [`parse_interactions`].
pub fn write_interactions<W: Write>(mut w: W, interactions: &[Interaction]) -> Result<(), DataError> {
    for it in interactions {
        writeln!(w, "{}\t{}\t{}", it.user_id, it.item_id, it.timestamp)?;
    }
    Ok(())
}
