//! Interaction ingestion, implicit-feedback filtering, splitting, and
//! negative-sampled training batches.
//!
//! The pipeline is: [`load_interactions`] -> [`binarize`] ->
//! [`kcore_filter`] -> [`split`], producing an [`ImplicitDataset`] with
//! dense user/item indices and an 8:1:1 train/valid/test partition.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("unknown schema column `{0}`")]
    UnknownColumn(String),
    #[error("{0}")]
    Invalid(String),
}

/// One parsed interaction record, tokens untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    User,
    Item,
    Rating,
    Timestamp,
}

/// Column layout and delimiter for a delimiter-separated interaction log.
#[derive(Debug, Clone)]
pub struct Schema {
    /// Field separator. `None` auto-detects tab vs comma per line.
    pub delimiter: Option<String>,
    pub columns: Vec<Column>,
}

impl Schema {
    /// Parse a comma-separated column list such as
    /// `"user,item,rating,timestamp"`.
    pub fn parse(spec: &str) -> Result<Self, DataError> {
        let mut columns = Vec::new();
        for name in spec.split(',') {
            let col = match name.trim() {
                "user" => Column::User,
                "item" => Column::Item,
                "rating" => Column::Rating,
                "timestamp" => Column::Timestamp,
                other => return Err(DataError::UnknownColumn(other.to_string())),
            };
            columns.push(col);
        }
        let schema = Schema {
            delimiter: None,
            columns,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_delimiter(mut self, delim: &str) -> Self {
        self.delimiter = Some(delim.to_string());
        self
    }

    fn validate(&self) -> Result<(), DataError> {
        let count = |c: Column| self.columns.iter().filter(|&&x| x == c).count();
        if count(Column::User) != 1 || count(Column::Item) != 1 {
            return Err(DataError::Invalid(
                "schema must name `user` and `item` exactly once".into(),
            ));
        }
        if count(Column::Rating) > 1 || count(Column::Timestamp) > 1 {
            return Err(DataError::Invalid(
                "schema may name `rating` and `timestamp` at most once".into(),
            ));
        }
        Ok(())
    }

    fn split_line<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match &self.delimiter {
            Some(d) => line.split(d.as_str()).collect(),
            None => {
                if line.contains('\t') {
                    line.split('\t').collect()
                } else {
                    line.split(',').collect()
                }
            }
        }
    }
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            delimiter: None,
            columns: vec![Column::User, Column::Item, Column::Rating, Column::Timestamp],
        }
    }
}

/// Parse an interaction log. Returns one record per non-empty row, in
/// input order. Malformed rows are reported with their 1-based row
/// number.
pub fn load_interactions(path: &Path, schema: &Schema) -> Result<Vec<RawInteraction>, DataError> {
    schema.validate()?;
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let row = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = schema.split_line(&line);
        if fields.len() < schema.columns.len() {
            return Err(DataError::MalformedRow {
                row,
                reason: format!(
                    "expected {} fields, found {}",
                    schema.columns.len(),
                    fields.len()
                ),
            });
        }
        let mut user = "";
        let mut item = "";
        let mut rating = None;
        let mut timestamp = None;
        for (col, field) in schema.columns.iter().zip(fields.iter()) {
            match col {
                Column::User => user = field.trim(),
                Column::Item => item = field.trim(),
                Column::Rating => {
                    let v: f64 = field.trim().parse().map_err(|_| DataError::MalformedRow {
                        row,
                        reason: format!("rating `{}` is not numeric", field.trim()),
                    })?;
                    rating = Some(v);
                }
                Column::Timestamp => {
                    let v: i64 = field.trim().parse().map_err(|_| DataError::MalformedRow {
                        row,
                        reason: format!("timestamp `{}` is not an integer", field.trim()),
                    })?;
                    timestamp = Some(v);
                }
            }
        }
        if user.is_empty() || item.is_empty() {
            return Err(DataError::MalformedRow {
                row,
                reason: "empty user or item token".into(),
            });
        }
        out.push(RawInteraction {
            user: user.to_string(),
            item: item.to_string(),
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Keep rows whose rating exceeds `threshold` (rows without a rating are
/// already implicit and are kept). Duplicate (user, item) pairs collapse
/// to their first occurrence.
pub fn binarize(raw: &[RawInteraction], threshold: f64) -> Vec<(String, String)> {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut out = Vec::new();
    for r in raw {
        let keep = match r.rating {
            Some(v) => v > threshold,
            None => true,
        };
        if keep && seen.insert((r.user.as_str(), r.item.as_str())) {
            out.push((r.user.clone(), r.item.clone()));
        }
    }
    out
}

/// Iteratively drop users and items with degree below `min_count` until
/// a fixed point. The result is the maximal subgraph in which every
/// surviving user and item has degree >= `min_count` (possibly empty).
pub fn kcore_filter(mut pairs: Vec<(String, String)>, min_count: usize) -> Vec<(String, String)> {
    assert!(min_count >= 1, "min_count must be at least 1");
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (u, i) in &pairs {
            *user_deg.entry(u.as_str()).or_default() += 1;
            *item_deg.entry(i.as_str()).or_default() += 1;
        }
        let before = pairs.len();
        let keep: Vec<bool> = pairs
            .iter()
            .map(|(u, i)| user_deg[u.as_str()] >= min_count && item_deg[i.as_str()] >= min_count)
            .collect();
        let mut it = keep.iter();
        pairs.retain(|_| *it.next().unwrap());
        if pairs.len() == before {
            return pairs;
        }
    }
}

/// Re-indexed interactions with train/valid/test splits. Indices are
/// dense: users in `[0, num_users)`, items in `[0, num_items)`, assigned
/// by first appearance in the shuffled train split. Users and items that
/// never appear in train are dropped from valid/test (they cannot be
/// scored).
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    train_pos: Vec<Vec<u32>>,
    valid_pos: Vec<Vec<u32>>,
    test_pos: Vec<Vec<u32>>,
}

impl ImplicitDataset {
    fn from_parts(
        num_users: usize,
        num_items: usize,
        train: Vec<(u32, u32)>,
        valid: Vec<(u32, u32)>,
        test: Vec<(u32, u32)>,
        user_tokens: Vec<String>,
        item_tokens: Vec<String>,
    ) -> Self {
        let mut ds = ImplicitDataset {
            num_users,
            num_items,
            train,
            valid,
            test,
            user_tokens,
            item_tokens,
            train_pos: Vec::new(),
            valid_pos: Vec::new(),
            test_pos: Vec::new(),
        };
        ds.train_pos = per_user_sorted(&ds.train, num_users);
        ds.valid_pos = per_user_sorted(&ds.valid, num_users);
        ds.test_pos = per_user_sorted(&ds.test, num_users);
        ds
    }

    /// Sorted train-split positive items of `u`.
    pub fn train_positives(&self, u: u32) -> &[u32] {
        &self.train_pos[u as usize]
    }

    pub fn valid_positives(&self, u: u32) -> &[u32] {
        &self.valid_pos[u as usize]
    }

    pub fn test_positives(&self, u: u32) -> &[u32] {
        &self.test_pos[u as usize]
    }

    pub fn has_train(&self, u: u32, i: u32) -> bool {
        self.train_pos[u as usize].binary_search(&i).is_ok()
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    /// Fraction of the user-item grid with no recorded interaction.
    pub fn sparsity(&self) -> f64 {
        let cells = (self.num_users * self.num_items) as f64;
        if cells == 0.0 {
            return 0.0;
        }
        1.0 - self.num_interactions() as f64 / cells
    }

    /// Write the dataset as a versioned plain-text cache.
    pub fn write_cache(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        let io_err = |source: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        writeln!(w, "{CACHE_HEADER}").map_err(io_err)?;
        writeln!(
            w,
            "{} {} {} {} {}",
            self.num_users,
            self.num_items,
            self.train.len(),
            self.valid.len(),
            self.test.len()
        )
        .map_err(io_err)?;
        for t in &self.user_tokens {
            writeln!(w, "{t}").map_err(io_err)?;
        }
        for t in &self.item_tokens {
            writeln!(w, "{t}").map_err(io_err)?;
        }
        for split in [&self.train, &self.valid, &self.test] {
            for (u, i) in split {
                writeln!(w, "{u} {i}").map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    /// Read a cache written by [`ImplicitDataset::write_cache`].
    pub fn read_cache(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let io_err = |source: std::io::Error| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let next_line = move |lines: &mut std::io::Lines<BufReader<File>>| {
            lines
                .next()
                .ok_or_else(|| DataError::Invalid("dataset cache truncated".into()))?
                .map_err(io_err)
        };
        let header = next_line(&mut lines)?;
        if header != CACHE_HEADER {
            return Err(DataError::Invalid(format!(
                "unsupported dataset cache header `{header}`"
            )));
        }
        let counts_line = next_line(&mut lines)?;
        let counts: Vec<usize> = counts_line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| DataError::Invalid("bad count line".into())))
            .collect::<Result<_, _>>()?;
        if counts.len() != 5 {
            return Err(DataError::Invalid("bad count line".into()));
        }
        let (num_users, num_items) = (counts[0], counts[1]);
        let mut user_tokens = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            user_tokens.push(next_line(&mut lines)?);
        }
        let mut item_tokens = Vec::with_capacity(num_items);
        for _ in 0..num_items {
            item_tokens.push(next_line(&mut lines)?);
        }
        let read_split = |len: usize,
                              lines: &mut std::io::Lines<BufReader<File>>|
         -> Result<Vec<(u32, u32)>, DataError> {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                let line = lines
                    .next()
                    .ok_or_else(|| DataError::Invalid("dataset cache truncated".into()))?
                    .map_err(io_err)?;
                let mut it = line.split_whitespace();
                let u: u32 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| DataError::Invalid("bad edge line".into()))?;
                let i: u32 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| DataError::Invalid("bad edge line".into()))?;
                if u as usize >= num_users || i as usize >= num_items {
                    return Err(DataError::Invalid("edge index out of range".into()));
                }
                v.push((u, i));
            }
            Ok(v)
        };
        let train = read_split(counts[2], &mut lines)?;
        let valid = read_split(counts[3], &mut lines)?;
        let test = read_split(counts[4], &mut lines)?;
        Ok(ImplicitDataset::from_parts(
            num_users,
            num_items,
            train,
            valid,
            test,
            user_tokens,
            item_tokens,
        ))
    }
}

const CACHE_HEADER: &str = "rgcl-dataset-cache v1";

fn per_user_sorted(pairs: &[(u32, u32)], num_users: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); num_users];
    for &(u, i) in pairs {
        out[u as usize].push(i);
    }
    for v in &mut out {
        v.sort_unstable();
    }
    out
}

/// Shuffle the interactions under `seed`, partition by cumulative ratio,
/// and re-index densely. Pairs are expected deduplicated (as produced by
/// [`binarize`]); split disjointness relies on it.
pub fn split(
    pairs: &[(String, String)],
    ratios: (u32, u32, u32),
    seed: u64,
) -> Result<ImplicitDataset, DataError> {
    if pairs.is_empty() {
        return Err(DataError::Invalid("no interactions to split".into()));
    }
    let total = ratios.0 as u64 + ratios.1 as u64 + ratios.2 as u64;
    if total == 0 {
        return Err(DataError::Invalid("split ratios sum to zero".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n = pairs.len() as u64;
    let n_train = (n * ratios.0 as u64 / total) as usize;
    let n_train_valid = (n * (ratios.0 + ratios.1) as u64 / total) as usize;

    let mut user_index: HashMap<&str, u32> = HashMap::new();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    let mut user_tokens = Vec::new();
    let mut item_tokens = Vec::new();
    let mut train = Vec::with_capacity(n_train);
    for &idx in &order[..n_train] {
        let (u_tok, i_tok) = (&pairs[idx].0, &pairs[idx].1);
        let u = *user_index.entry(u_tok.as_str()).or_insert_with(|| {
            user_tokens.push(u_tok.clone());
            (user_tokens.len() - 1) as u32
        });
        let i = *item_index.entry(i_tok.as_str()).or_insert_with(|| {
            item_tokens.push(i_tok.clone());
            (item_tokens.len() - 1) as u32
        });
        train.push((u, i));
    }
    let map_known = |idx: usize| -> Option<(u32, u32)> {
        let (u_tok, i_tok) = (&pairs[idx].0, &pairs[idx].1);
        match (
            user_index.get(u_tok.as_str()),
            item_index.get(i_tok.as_str()),
        ) {
            (Some(&u), Some(&i)) => Some((u, i)),
            _ => None,
        }
    };
    let valid: Vec<(u32, u32)> = order[n_train..n_train_valid]
        .iter()
        .filter_map(|&idx| map_known(idx))
        .collect();
    let test: Vec<(u32, u32)> = order[n_train_valid..]
        .iter()
        .filter_map(|&idx| map_known(idx))
        .collect();

    if train.is_empty() {
        return Err(DataError::Invalid(
            "train split is empty; not enough interactions".into(),
        ));
    }
    debug_assert!(splits_disjoint(&train, &valid, &test));
    Ok(ImplicitDataset::from_parts(
        user_tokens.len(),
        item_tokens.len(),
        train,
        valid,
        test,
        user_tokens,
        item_tokens,
    ))
}

fn splits_disjoint(train: &[(u32, u32)], valid: &[(u32, u32)], test: &[(u32, u32)]) -> bool {
    let a: HashSet<_> = train.iter().collect();
    let b: HashSet<_> = valid.iter().collect();
    let c: HashSet<_> = test.iter().collect();
    a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c)
}

/// One negative-sampled training batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// (user, positive item, negative item)
    pub triples: Vec<(u32, u32, u32)>,
    /// Distinct users in the batch, ascending.
    pub users: Vec<u32>,
    /// Distinct items (positives and negatives) in the batch, ascending.
    pub items: Vec<u32>,
    /// Triples dropped because the user's positives cover every item.
    pub skipped: usize,
}

/// Uniform negative item for `user` by rejection, or `None` when the
/// user's train positives cover the whole catalogue.
pub fn sample_negative(
    ds: &ImplicitDataset,
    user: u32,
    rng: &mut impl Rng,
) -> Option<u32> {
    if ds.train_positives(user).len() >= ds.num_items {
        return None;
    }
    loop {
        let j = rng.gen_range(0..ds.num_items as u32);
        if !ds.has_train(user, j) {
            return Some(j);
        }
    }
}

/// Epoch-scoped batch stream: every train pair is visited exactly once
/// per epoch in shuffled order; negatives are drawn fresh per call.
pub struct EpochBatches {
    order: Vec<u32>,
    cursor: usize,
    batch_size: usize,
}

impl EpochBatches {
    pub fn new(ds: &ImplicitDataset, batch_size: usize, rng: &mut impl Rng) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        assert!(!ds.train.is_empty(), "train split is empty");
        let mut order: Vec<u32> = (0..ds.train.len() as u32).collect();
        order.shuffle(rng);
        EpochBatches {
            order,
            cursor: 0,
            batch_size,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self, ds: &ImplicitDataset, rng: &mut impl Rng) -> Option<TrainBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idxs = &self.order[self.cursor..end];
        self.cursor = end;
        let mut triples = Vec::with_capacity(idxs.len());
        let mut skipped = 0;
        for &pair_idx in idxs {
            let (u, i_pos) = ds.train[pair_idx as usize];
            match sample_negative(ds, u, rng) {
                Some(i_neg) => triples.push((u, i_pos, i_neg)),
                None => skipped += 1,
            }
        }
        let mut users: Vec<u32> = triples.iter().map(|t| t.0).collect();
        users.sort_unstable();
        users.dedup();
        let mut items: Vec<u32> = triples.iter().flat_map(|t| [t.1, t.2]).collect();
        items.sort_unstable();
        items.dedup();
        Some(TrainBatch {
            triples,
            users,
            items,
            skipped,
        })
    }
}

/// Draw a single batch of up to `batch_size` train pairs (fresh shuffle)
/// with one uniform negative per pair.
pub fn sample_batch(ds: &ImplicitDataset, batch_size: usize, rng: &mut impl Rng) -> TrainBatch {
    let mut epoch = EpochBatches::new(ds, batch_size, rng);
    epoch.next_batch(ds, rng).expect("train split is non-empty")
}

/// Synthetic implicit-feedback pairs with a popularity-skewed item
/// distribution; used by scale tests and benchmarks.
pub fn synthetic_pairs(
    num_users: usize,
    num_items: usize,
    num_edges: usize,
    seed: u64,
) -> Vec<(String, String)> {
    assert!(num_users > 0 && num_items > 0);
    assert!(
        num_edges <= num_users * num_items / 2,
        "edge budget too dense for dedup sampling"
    );
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(num_edges);
    while out.len() < num_edges {
        let u = rng.gen_range(0..num_users);
        // quadratic skew: low item ids are popular
        let t: f64 = rng.gen();
        let i = ((t * t) * num_items as f64) as usize;
        let i = i.min(num_items - 1);
        if seen.insert((u, i)) {
            out.push((format!("u{u}"), format!("i{i}")));
        }
    }
    out
}

use rand::SeedableRng;
