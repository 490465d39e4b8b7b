//! Full-ranking top-K evaluation, grouped robustness decomposition, and
//! boundary-margin diagnostics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment;
use crate::dataset::ImplicitDataset;
use crate::linalg::{dot, Mat};

/// Which held-out split to score. Validation masks the user's train
/// positives; test masks train and validation positives so earlier
/// splits cannot leak into the candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Valid,
    Test,
}

/// Mean Recall@K / NDCG@K over evaluated users.
#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
}

impl RankReport {
    pub fn metric(&self, k: usize, ndcg: bool) -> Option<f64> {
        let pos = self.ks.iter().position(|&x| x == k)?;
        Some(if ndcg { self.ndcg[pos] } else { self.recall[pos] })
    }
}

/// All unmasked items for `user`, best score first; ties break by
/// ascending item index so rankings are reproducible.
pub fn full_rank(z: &Mat, num_users: usize, user: usize, mask: &[u32]) -> Vec<u32> {
    assert!(user < num_users, "user index out of range");
    let num_items = z.rows() - num_users;
    let zu = z.row(user);
    let mut scored: Vec<(f64, u32)> = (0..num_items as u32)
        .filter(|i| mask.binary_search(i).is_err())
        .map(|i| {
            let s = dot(zu, z.row(num_users + i as usize));
            // canonicalize -0.0 so numerically tied scores fall through
            // to the index rule under total_cmp
            (if s == 0.0 { 0.0 } else { s }, i)
        })
        .collect();
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Recall@K and NDCG@K of one ranking against a sorted target set.
/// Gains are binary with discount `1/log2(rank+1)`; the ideal DCG places
/// `min(|targets|, K)` hits at the top.
pub fn metrics_at_k(ranked: &[u32], targets: &[u32], k: usize) -> (f64, f64) {
    assert!(k >= 1, "K must be at least 1");
    assert!(!targets.is_empty(), "empty target set");
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (rank0, item) in ranked.iter().take(k).enumerate() {
        if targets.binary_search(item).is_ok() {
            hits += 1;
            dcg += 1.0 / ((rank0 as f64 + 2.0).log2());
        }
    }
    let ideal = targets.len().min(k);
    let idcg: f64 = (0..ideal).map(|t| 1.0 / ((t as f64 + 2.0).log2())).sum();
    (hits as f64 / targets.len() as f64, dcg / idcg)
}

fn merged_mask(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out.sort_unstable();
    out.dedup();
    out
}

fn targets_and_mask(ds: &ImplicitDataset, split: EvalSplit, u: u32) -> (&[u32], Vec<u32>) {
    match split {
        EvalSplit::Valid => (ds.valid_positives(u), ds.train_positives(u).to_vec()),
        EvalSplit::Test => (
            ds.test_positives(u),
            merged_mask(ds.train_positives(u), ds.valid_positives(u)),
        ),
    }
}

/// Full-ranking evaluation of every user with a non-empty target set.
pub fn evaluate(z: &Mat, ds: &ImplicitDataset, split: EvalSplit, ks: &[usize]) -> RankReport {
    let per_user: Vec<(Vec<f64>, Vec<f64>)> = (0..ds.num_users as u32)
        .into_par_iter()
        .filter_map(|u| {
            let (targets, mask) = targets_and_mask(ds, split, u);
            if targets.is_empty() {
                return None;
            }
            let ranked = full_rank(z, ds.num_users, u as usize, &mask);
            let mut recalls = Vec::with_capacity(ks.len());
            let mut ndcgs = Vec::with_capacity(ks.len());
            for &k in ks {
                let (r, n) = metrics_at_k(&ranked, targets, k);
                recalls.push(r);
                ndcgs.push(n);
            }
            Some((recalls, ndcgs))
        })
        .collect();
    let users = per_user.len();
    let mut recall = vec![0.0; ks.len()];
    let mut ndcg = vec![0.0; ks.len()];
    for (r, n) in &per_user {
        for i in 0..ks.len() {
            recall[i] += r[i];
            ndcg[i] += n[i];
        }
    }
    if users > 0 {
        for i in 0..ks.len() {
            recall[i] /= users as f64;
            ndcg[i] /= users as f64;
        }
    }
    RankReport {
        ks: ks.to_vec(),
        recall,
        ndcg,
        users_evaluated: users,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupMetrics {
    /// Members of the group (users or items).
    pub size: usize,
    /// Users from the group that were actually evaluated (user groups
    /// only; equals `size` partitioning for item groups).
    pub evaluated: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// Five-way grouped evaluation on the test split: user groups by train
/// interaction count and item groups by popularity, the latter with the
/// decomposed metrics whose per-group values sum to the ungrouped
/// truncated-list value.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub k: usize,
    pub user_groups: Vec<GroupMetrics>,
    pub item_groups: Vec<GroupMetrics>,
    /// Decomposed recall/NDCG without the group restriction; the item
    /// group columns sum to these.
    pub overall_decomposed_recall: f64,
    pub overall_decomposed_ndcg: f64,
    pub users_evaluated: usize,
}

pub const NUM_GROUPS: usize = 5;

/// Split `ids` (pre-sorted by the grouping key, ascending) into
/// `NUM_GROUPS` contiguous bins whose sizes differ by at most one; the
/// first `len % NUM_GROUPS` bins take the extra member.
fn equal_bins(count: usize) -> Vec<(usize, usize)> {
    let base = count / NUM_GROUPS;
    let extra = count % NUM_GROUPS;
    let mut out = Vec::with_capacity(NUM_GROUPS);
    let mut start = 0;
    for g in 0..NUM_GROUPS {
        let size = base + usize::from(g < extra);
        out.push((start, start + size));
        start += size;
    }
    out
}

pub fn group_eval(z: &Mat, ds: &ImplicitDataset, k: usize) -> GroupReport {
    assert!(
        ds.num_users >= NUM_GROUPS && ds.num_items >= NUM_GROUPS,
        "need at least {NUM_GROUPS} users and items to group"
    );
    // ascending train degree, ties by index
    let mut users_by_degree: Vec<u32> = (0..ds.num_users as u32).collect();
    users_by_degree.sort_by_key(|&u| (ds.train_positives(u).len(), u));
    let mut item_degree = vec![0usize; ds.num_items];
    for &(_, i) in &ds.train {
        item_degree[i as usize] += 1;
    }
    let mut items_by_degree: Vec<u32> = (0..ds.num_items as u32).collect();
    items_by_degree.sort_by_key(|&i| (item_degree[i as usize], i));
    let mut item_group = vec![0usize; ds.num_items];
    let item_bins = equal_bins(ds.num_items);
    for (g, &(lo, hi)) in item_bins.iter().enumerate() {
        for &i in &items_by_degree[lo..hi] {
            item_group[i as usize] = g;
        }
    }

    // per evaluated user: standard metrics plus the decomposed per-group
    // numerators over the truncated predicted list
    struct UserRow {
        user: u32,
        recall: f64,
        ndcg: f64,
        group_recall: [f64; NUM_GROUPS],
        group_ndcg: [f64; NUM_GROUPS],
        // ungrouped decomposed values, tallied independently of the
        // group split so partition additivity is a real check
        decomposed_recall: f64,
        decomposed_ndcg: f64,
    }
    let rows: Vec<UserRow> = (0..ds.num_users as u32)
        .into_par_iter()
        .filter_map(|u| {
            let (targets, mask) = targets_and_mask(ds, EvalSplit::Test, u);
            if targets.is_empty() {
                return None;
            }
            let ranked = full_rank(z, ds.num_users, u as usize, &mask);
            let (recall, ndcg) = metrics_at_k(&ranked, targets, k);
            let truncated = targets.len().min(k);
            let idcg: f64 = (0..truncated).map(|t| 1.0 / ((t as f64 + 2.0).log2())).sum();
            let mut group_recall = [0.0; NUM_GROUPS];
            let mut group_ndcg = [0.0; NUM_GROUPS];
            let mut decomposed_recall = 0.0;
            let mut decomposed_ndcg = 0.0;
            for (rank0, item) in ranked.iter().take(truncated).enumerate() {
                if targets.binary_search(item).is_ok() {
                    let g = item_group[*item as usize];
                    let r = 1.0 / truncated as f64;
                    let n = 1.0 / ((rank0 as f64 + 2.0).log2()) / idcg;
                    group_recall[g] += r;
                    group_ndcg[g] += n;
                    decomposed_recall += r;
                    decomposed_ndcg += n;
                }
            }
            Some(UserRow {
                user: u,
                recall,
                ndcg,
                group_recall,
                group_ndcg,
                decomposed_recall,
                decomposed_ndcg,
            })
        })
        .collect();
    let users_evaluated = rows.len();

    let mut user_groups = Vec::with_capacity(NUM_GROUPS);
    let user_bins = equal_bins(ds.num_users);
    for &(lo, hi) in &user_bins {
        let members: std::collections::HashSet<u32> =
            users_by_degree[lo..hi].iter().copied().collect();
        let mut evaluated = 0usize;
        let mut recall = 0.0;
        let mut ndcg = 0.0;
        for row in &rows {
            if members.contains(&row.user) {
                evaluated += 1;
                recall += row.recall;
                ndcg += row.ndcg;
            }
        }
        if evaluated > 0 {
            recall /= evaluated as f64;
            ndcg /= evaluated as f64;
        }
        user_groups.push(GroupMetrics {
            size: hi - lo,
            evaluated,
            recall,
            ndcg,
        });
    }

    let denom = users_evaluated.max(1) as f64;
    let mut item_groups = Vec::with_capacity(NUM_GROUPS);
    for (g, &(lo, hi)) in item_bins.iter().enumerate() {
        let recall: f64 = rows.iter().map(|r| r.group_recall[g]).sum::<f64>() / denom;
        let ndcg: f64 = rows.iter().map(|r| r.group_ndcg[g]).sum::<f64>() / denom;
        item_groups.push(GroupMetrics {
            size: hi - lo,
            evaluated: hi - lo,
            recall,
            ndcg,
        });
    }
    let overall_decomposed_recall =
        rows.iter().map(|r| r.decomposed_recall).sum::<f64>() / denom;
    let overall_decomposed_ndcg = rows.iter().map(|r| r.decomposed_ndcg).sum::<f64>() / denom;

    GroupReport {
        k,
        user_groups,
        item_groups,
        overall_decomposed_recall,
        overall_decomposed_ndcg,
        users_evaluated,
    }
}

/// Distribution summary of boundary margins over a user sample.
#[derive(Debug, Clone, Serialize)]
pub struct MarginSummary {
    pub mean: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub count: usize,
    pub degenerate: usize,
}

/// Per sampled user, the margin `|g|/‖f‖₁` at the selected candidate
/// pair (up to `pairs_per_user` positives crossed with as many sampled
/// negatives). Degenerate users are excluded and counted.
pub fn measure_margins(
    z: &Mat,
    ds: &ImplicitDataset,
    num_layers: usize,
    sample_size: usize,
    pairs_per_user: usize,
    rng: &mut impl Rng,
) -> MarginSummary {
    let mut users: Vec<u32> = (0..ds.num_users as u32)
        .filter(|&u| !ds.train_positives(u).is_empty())
        .collect();
    users.shuffle(rng);
    users.truncate(sample_size);
    let mut margins = Vec::new();
    let mut degenerate = 0usize;
    for &u in &users {
        let positives = ds.train_positives(u);
        let mut pos_sample: Vec<u32> = positives.to_vec();
        pos_sample.shuffle(rng);
        pos_sample.truncate(pairs_per_user);
        let mut negatives = Vec::new();
        for _ in 0..pairs_per_user {
            if let Some(n) = crate::dataset::sample_negative(ds, u, rng) {
                negatives.push(n);
            }
        }
        let mut best: Option<f64> = None;
        for &p in &pos_sample {
            for &n in &negatives {
                let ratio = augment::margin_ratio(
                    z,
                    u as usize,
                    ds.num_users + p as usize,
                    ds.num_users + n as usize,
                    num_layers,
                );
                if let Some(r) = ratio {
                    best = Some(best.map_or(r, |b: f64| b.min(r)));
                }
            }
        }
        match best {
            Some(r) => margins.push(r),
            None => degenerate += 1,
        }
    }
    margins.sort_by(f64::total_cmp);
    let count = margins.len();
    let quantile = |q: f64| -> f64 {
        if margins.is_empty() {
            return 0.0;
        }
        let idx = ((count - 1) as f64 * q).round() as usize;
        margins[idx]
    };
    MarginSummary {
        mean: if count > 0 {
            margins.iter().sum::<f64>() / count as f64
        } else {
            0.0
        },
        median: quantile(0.5),
        p10: quantile(0.1),
        p90: quantile(0.9),
        count,
        degenerate,
    }
}
