//! The training loop: per-batch boundary perturbations, constrained
//! random views, adversarial-contrastive views, loss assembly, one Adam
//! update per batch, early stopping on a validation metric, and
//! versioned resumable checkpoints.
//!
//! Per-step order: forward -> boundary perturbations -> random views
//! (z', z'') -> adversarial-contrastive views (z_ac) -> contrastive loss
//! -> adversarial examples -> adversarial ranking loss -> clean ranking
//! loss -> joint objective -> Adam update. All perturbations are
//! constants with respect to the parameter update; gradients flow only
//! through the propagation stack.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{
    adversarial_contrastive, adversarial_offset, boundary_perturbation, eta_within_bound,
    fgsm_dominates, projection_sound, BoundaryPerturbation, RandomDraw, ViewOptions,
};
use crate::dataset::{sample_negative, EpochBatches, ImplicitDataset, TrainBatch};
use crate::diff::Tape;
use crate::eval::{evaluate, EvalSplit};
use crate::graph::{build_adjacency, NormalizedAdjacency};
use crate::linalg::Mat;
use crate::losses::{bpr_loss_op, infonce_op, LossBreakdown};
use crate::model::init_embeddings;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("train split is empty")]
    EmptyTrain,
    #[error("non-finite loss in term `{term}` (value {value})")]
    NonFinite { term: &'static str, value: f64 },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint rejected: {0}")]
    BadCheckpoint(String),
}

/// Early-stopping metric, serialized as `recall@K` / `ndcg@K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    Recall(usize),
    Ndcg(usize),
}

impl EvalMetric {
    pub fn k(&self) -> usize {
        match self {
            EvalMetric::Recall(k) | EvalMetric::Ndcg(k) => *k,
        }
    }
}

impl std::fmt::Display for EvalMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMetric::Recall(k) => write!(f, "recall@{k}"),
            EvalMetric::Ndcg(k) => write!(f, "ndcg@{k}"),
        }
    }
}

impl std::str::FromStr for EvalMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| format!("metric `{s}` must look like recall@20"))?;
        let k: usize = k.parse().map_err(|_| format!("bad K in metric `{s}`"))?;
        if k == 0 {
            return Err(format!("K must be positive in `{s}`"));
        }
        match name {
            "recall" => Ok(EvalMetric::Recall(k)),
            "ndcg" => Ok(EvalMetric::Ndcg(k)),
            _ => Err(format!("unknown metric `{name}`")),
        }
    }
}

impl Serialize for EvalMetric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for EvalMetric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Every hyperparameter of a run. Unknown keys in a config file are
/// rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Contrastive loss weight.
    pub alpha: f64,
    /// Adversarial loss weight.
    pub mu: f64,
    /// Initial random-perturbation magnitude.
    pub epsilon: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Drop the boundary projection on random views.
    pub no_cons: bool,
    /// Replace the uniform draw with the all-ones vector.
    pub no_rand: bool,
    /// Drop the adversarial-contrastive view and its loss terms.
    pub no_ac: bool,
    /// Drop the adversarial ranking term entirely.
    pub no_adv: bool,
    pub eval_metric: EvalMetric,
    /// Additional boundary candidate pairs sampled per node (k gives
    /// k x k extras on top of the node's own batch triples).
    pub extra_candidate_pairs: usize,
    /// Contrastive denominators over every node instead of the batch;
    /// only sensible for tiny datasets.
    pub cl_fullset: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 64,
            num_layers: 2,
            batch_size: 4096,
            learning_rate: 5e-3,
            alpha: 1e-3,
            mu: 0.1,
            epsilon: 0.1,
            tau: 0.2,
            weight_decay: 0.0,
            patience: 10,
            max_epochs: 200,
            seed: 42,
            no_cons: false,
            no_rand: false,
            no_ac: false,
            no_adv: false,
            eval_metric: EvalMetric::Recall(20),
            extra_candidate_pairs: 0,
            cl_fullset: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.learning_rate) {
            return bad("learning_rate must be nonnegative");
        }
        if !nonneg(self.alpha) || !nonneg(self.mu) || !nonneg(self.weight_decay) {
            return bad("loss weights must be nonnegative");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    /// Stable 64-bit hash of the serialized config, used to tie
    /// checkpoints to the settings that produced them.
    pub fn hash64(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        fnv1a(json.as_bytes())
    }

    /// Ablation effect on total loss weights.
    fn effective_mu(&self) -> f64 {
        if self.no_adv {
            0.0
        } else {
            self.mu
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent deterministic stream for (seed, epoch, purpose). Batch
/// order/negatives and augmentation draws use separate streams so
/// ablations that skip draws do not shift the batch sequence.
pub fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64((epoch as u64) << 8 | stream),
    ))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates shaped like the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Mat,
    pub v: Mat,
    pub step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState {
            m: Mat::zeros(rows, cols),
            v: Mat::zeros(rows, cols),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, optionally with decoupled L2 decay.
pub fn adam_step(
    emb: &mut Mat,
    grad: &Mat,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(emb.rows(), grad.rows());
    assert_eq!(emb.cols(), grad.cols());
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let e = emb.data_mut();
    let g = grad.data();
    for idx in 0..e.len() {
        m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * g[idx];
        v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * g[idx] * g[idx];
        let m_hat = m[idx] / bc1;
        let v_hat = v[idx] / bc2;
        e[idx] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        if weight_decay > 0.0 {
            e[idx] -= lr * weight_decay * e[idx];
        }
    }
}

/// Constraint-audit counters; the FGSM check compares the signed step
/// against `fgsm_draws` random feasible directions per node.
#[derive(Debug, Clone)]
pub struct AuditStats {
    pub projection_checks: u64,
    pub projection_violations: u64,
    pub eta_checks: u64,
    pub eta_violations: u64,
    pub fgsm_checks: u64,
    pub fgsm_violations: u64,
    pub fgsm_draws: usize,
    rng: ChaCha20Rng,
}

impl AuditStats {
    pub fn new(fgsm_draws: usize) -> Self {
        AuditStats {
            projection_checks: 0,
            projection_violations: 0,
            eta_checks: 0,
            eta_violations: 0,
            fgsm_checks: 0,
            fgsm_violations: 0,
            fgsm_draws,
            rng: ChaCha20Rng::seed_from_u64(0xa0d17),
        }
    }

    pub fn total_violations(&self) -> u64 {
        self.projection_violations + self.eta_violations + self.fgsm_violations
    }
}

/// Per-node perturbation bundle for one side of the batch.
struct SidePerturbations {
    nodes: Vec<usize>,
    boundary: Vec<BoundaryPerturbation>,
    offsets1: Mat,
    offsets2: Mat,
    /// z_ac offsets; absent when the adversarial-contrastive view is off.
    offsets_ac: Option<Mat>,
}

fn offsets_to_mat(offsets: &[Vec<f64>], dim: usize) -> Mat {
    let mut m = Mat::zeros(offsets.len(), dim);
    for (r, o) in offsets.iter().enumerate() {
        // an empty offset (zero propagation layers) means no displacement
        if !o.is_empty() {
            m.row_mut(r).copy_from_slice(o);
        }
    }
    m
}

/// Candidate (positive, negative) partner node pairs per anchor node.
type CandidateMap = HashMap<usize, Vec<(usize, usize)>>;

fn user_candidates(
    ds: &ImplicitDataset,
    batch: &TrainBatch,
    users: &[usize],
    extra: usize,
    rng: &mut ChaCha20Rng,
) -> CandidateMap {
    let m = ds.num_users;
    let mut map: CandidateMap = HashMap::new();
    for &(u, p, n) in &batch.triples {
        map.entry(u as usize)
            .or_default()
            .push((m + p as usize, m + n as usize));
    }
    if extra > 0 {
        for &node in users {
            let u = node as u32;
            let positives = ds.train_positives(u);
            if positives.is_empty() {
                continue;
            }
            let entry = map.entry(node).or_default();
            let mut pos_sample = Vec::with_capacity(extra);
            for _ in 0..extra {
                pos_sample.push(positives[rng.gen_range(0..positives.len())]);
            }
            let mut neg_sample = Vec::with_capacity(extra);
            for _ in 0..extra {
                if let Some(neg) = sample_negative(ds, u, rng) {
                    neg_sample.push(neg);
                }
            }
            for &p in &pos_sample {
                for &n in &neg_sample {
                    entry.push((m + p as usize, m + n as usize));
                }
            }
        }
    }
    map
}

/// Dual candidates for items: positive partners are batch users that
/// interacted with the item in train, negatives are batch users that did
/// not. Items with no batch interactor stay degenerate.
fn item_candidates(
    ds: &ImplicitDataset,
    batch_users: &[u32],
    items: &[usize],
    extra: usize,
    rng: &mut ChaCha20Rng,
) -> CandidateMap {
    let m = ds.num_users;
    let mut interactors: HashMap<usize, Vec<u32>> = HashMap::new();
    let item_set: std::collections::HashSet<usize> = items.iter().copied().collect();
    for &u in batch_users {
        for &i in ds.train_positives(u) {
            let node = m + i as usize;
            if item_set.contains(&node) {
                interactors.entry(node).or_default().push(u);
            }
        }
    }
    let mut map: CandidateMap = HashMap::new();
    for &node in items {
        let Some(pos_users) = interactors.get(&node) else {
            continue;
        };
        let all_interact = pos_users.len() >= batch_users.len();
        if all_interact {
            continue;
        }
        let item = (node - m) as u32;
        let draw_neg = |rng: &mut ChaCha20Rng| -> u32 {
            loop {
                let u = batch_users[rng.gen_range(0..batch_users.len())];
                if !ds.has_train(u, item) {
                    return u;
                }
            }
        };
        let pairs = map.entry(node).or_default();
        let count = extra.max(1);
        for _ in 0..count {
            let p = pos_users[rng.gen_range(0..pos_users.len())];
            for _ in 0..count {
                let n = draw_neg(rng);
                pairs.push((p as usize, n as usize));
            }
        }
    }
    map
}

#[allow(clippy::too_many_arguments)]
fn side_perturbations(
    stack_rows: &[Mat],
    z: &Mat,
    nodes: Vec<usize>,
    candidates: &CandidateMap,
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
    audit: &mut Option<&mut AuditStats>,
    build_ac: bool,
) -> SidePerturbations {
    let num_layers = cfg.num_layers;
    let dim = cfg.embed_dim;
    let opts = ViewOptions {
        all_ones: cfg.no_rand,
        unconstrained: cfg.no_cons,
    };
    let mut boundary = Vec::with_capacity(nodes.len());
    let mut draw1 = Vec::with_capacity(nodes.len());
    let mut draw2 = Vec::with_capacity(nodes.len());
    let mut draw_ac: Vec<RandomDraw> = Vec::with_capacity(nodes.len());
    for (local, &node) in nodes.iter().enumerate() {
        let bp = match candidates.get(&node) {
            Some(pairs) if !pairs.is_empty() => {
                boundary_perturbation(z, node, pairs, num_layers)
            }
            _ => BoundaryPerturbation::zero(num_layers, dim),
        };
        let d1 = random_draw_local(stack_rows, local, &bp, cfg.epsilon, rng, opts, num_layers, dim);
        let d2 = random_draw_local(stack_rows, local, &bp, cfg.epsilon, rng, opts, num_layers, dim);
        if build_ac {
            draw_ac.push(random_draw_local(
                stack_rows, local, &bp, cfg.epsilon, rng, opts, num_layers, dim,
            ));
        }
        boundary.push(bp);
        draw1.push(d1);
        draw2.push(d2);
    }

    let offsets1 = offsets_to_mat(
        &draw1.iter().map(|d| d.offset(num_layers)).collect::<Vec<_>>(),
        dim,
    );
    let offsets2_vec: Vec<Vec<f64>> = draw2.iter().map(|d| d.offset(num_layers)).collect();
    let offsets2 = offsets_to_mat(&offsets2_vec, dim);

    let (offsets_ac, eta, eta_grad) = if build_ac {
        let bounds: Vec<f64> = boundary.iter().map(|b| b.bound).collect();
        let ac = adversarial_contrastive(
            z,
            &nodes,
            &draw_ac,
            &offsets2_vec,
            &bounds,
            cfg.tau,
            num_layers,
        );
        (
            Some(offsets_to_mat(&ac.offsets, dim)),
            ac.eta,
            Some(ac.grad),
        )
    } else {
        (None, Vec::new(), None)
    };

    if let Some(stats) = audit.as_deref_mut() {
        for (local, bp) in boundary.iter().enumerate() {
            if !cfg.no_cons {
                for draw in [&draw1[local], &draw2[local]] {
                    stats.projection_checks += 1;
                    if !projection_sound(draw, bp) {
                        stats.projection_violations += 1;
                    }
                }
            }
            if build_ac && !eta[local].is_empty() {
                stats.eta_checks += 1;
                if !eta_within_bound(&eta[local], bp.bound) {
                    stats.eta_violations += 1;
                }
                let grad = eta_grad.as_ref().unwrap().row(local);
                let eta_row = &eta[local][0];
                stats.fgsm_checks += 1;
                let mut ok = true;
                for _ in 0..stats.fgsm_draws {
                    let candidate: Vec<f64> = (0..dim)
                        .map(|_| stats.rng.gen_range(-1.0..=1.0) * bp.bound)
                        .collect();
                    if !fgsm_dominates(grad, eta_row, &candidate) {
                        ok = false;
                        break;
                    }
                }
                if !ok {
                    stats.fgsm_violations += 1;
                }
            }
        }
    }

    SidePerturbations {
        nodes,
        boundary,
        offsets1,
        offsets2,
        offsets_ac,
    }
}

/// Random draw reading sign patterns from per-layer gathered batch rows.
#[allow(clippy::too_many_arguments)]
fn random_draw_local(
    stack_rows: &[Mat],
    local: usize,
    bp: &BoundaryPerturbation,
    epsilon: f64,
    rng: &mut ChaCha20Rng,
    opts: ViewOptions,
    num_layers: usize,
    dim: usize,
) -> RandomDraw {
    use crate::linalg::{l2_norm, sign};
    let mut per_layer = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let h = stack_rows[l].row(local);
        let mut r: Vec<f64> = if opts.all_ones {
            vec![1.0; dim]
        } else {
            (0..dim).map(|_| rng.gen::<f64>()).collect()
        };
        for (rj, hj) in r.iter_mut().zip(h.iter()) {
            *rj *= sign(*hj);
        }
        let norm = l2_norm(&r);
        if norm > 0.0 {
            let s = epsilon / norm;
            for rj in &mut r {
                *rj *= s;
            }
        }
        if !opts.unconstrained {
            let bound = &bp.per_layer[l - 1];
            for (rj, bj) in r.iter_mut().zip(bound.iter()) {
                let b = bj.abs();
                *rj = rj.clamp(-b, b);
            }
        }
        per_layer.push(r);
    }
    RandomDraw { per_layer }
}

/// One full training step over `batch`; returns the loss breakdown and
/// applies one Adam update to `emb`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    ds: &ImplicitDataset,
    adj: &NormalizedAdjacency,
    cfg: &TrainConfig,
    emb: &mut Mat,
    adam: &mut AdamState,
    batch: &TrainBatch,
    rng_aug: &mut ChaCha20Rng,
    mut audit: Option<&mut AuditStats>,
) -> Result<LossBreakdown, TrainError> {
    let m = ds.num_users;
    let num_layers = cfg.num_layers;
    let mu = cfg.effective_mu();
    let alpha = cfg.alpha;
    if batch.triples.is_empty() {
        return Ok(LossBreakdown::compose(
            0.0,
            0.0,
            0.0,
            [0.0; 6],
            mu,
            alpha,
            cfg.tau,
        ));
    }

    // forward stack on the tape so gradients flow back into E
    let mut tape = Tape::with_adjacency(adj);
    let e_id = tape.leaf(emb.clone());
    let mut h_ids = vec![e_id];
    for _ in 0..num_layers {
        h_ids.push(tape.propagate(*h_ids.last().unwrap()));
    }
    let z_id = tape.mean_rows(h_ids.clone());

    let need_perturbations = alpha > 0.0 || mu > 0.0;
    let build_ac = alpha > 0.0 && !cfg.no_ac;

    let (user_side, item_side) = if need_perturbations {
        let user_nodes: Vec<usize> = if cfg.cl_fullset {
            (0..m).collect()
        } else {
            batch.users.iter().map(|&u| u as usize).collect()
        };
        let item_nodes: Vec<usize> = if cfg.cl_fullset {
            (m..m + ds.num_items).collect()
        } else {
            batch.items.iter().map(|&i| m + i as usize).collect()
        };
        let batch_users_for_items: Vec<u32> = if cfg.cl_fullset {
            (0..m as u32).collect()
        } else {
            batch.users.clone()
        };

        // snapshot z and the per-side stack rows; these borrows end
        // before new ops are recorded
        let z = tape.value(z_id).clone();
        let gather_side = |nodes: &[usize]| -> Vec<Mat> {
            h_ids
                .iter()
                .map(|&hid| tape.value(hid).gather_rows(nodes))
                .collect()
        };
        let user_stack_rows = gather_side(&user_nodes);
        let item_stack_rows = gather_side(&item_nodes);

        let mut user_cand = user_candidates(ds, batch, &user_nodes, cfg.extra_candidate_pairs, rng_aug);
        if cfg.cl_fullset {
            // off-batch users need at least one sampled pair
            for &node in &user_nodes {
                let u = node as u32;
                if user_cand.contains_key(&node) {
                    continue;
                }
                let positives = ds.train_positives(u);
                if positives.is_empty() {
                    continue;
                }
                let p = positives[rng_aug.gen_range(0..positives.len())];
                if let Some(n) = sample_negative(ds, u, rng_aug) {
                    user_cand.insert(node, vec![(m + p as usize, m + n as usize)]);
                }
            }
        }
        let item_cand = item_candidates(
            ds,
            &batch_users_for_items,
            &item_nodes,
            cfg.extra_candidate_pairs,
            rng_aug,
        );

        let user_side = side_perturbations(
            &user_stack_rows,
            &z,
            user_nodes,
            &user_cand,
            cfg,
            rng_aug,
            &mut audit,
            build_ac,
        );
        let item_side = side_perturbations(
            &item_stack_rows,
            &z,
            item_nodes,
            &item_cand,
            cfg,
            rng_aug,
            &mut audit,
            build_ac,
        );
        (Some(user_side), Some(item_side))
    } else {
        (None, None)
    };

    // ranking loss on clean scores
    let triples: Vec<(usize, usize, usize)> = batch
        .triples
        .iter()
        .map(|&(u, p, n)| (u as usize, m + p as usize, m + n as usize))
        .collect();
    let bpr_id = bpr_loss_op(&mut tape, z_id, &triples, None);
    let bpr_val = tape.value(bpr_id).as_scalar();
    if !bpr_val.is_finite() {
        return Err(TrainError::NonFinite {
            term: "bpr",
            value: bpr_val,
        });
    }

    // adversarial ranking loss over boundary-perturbed representations
    let mut adv_id = None;
    let mut adv_val = 0.0;
    if mu > 0.0 {
        let user_side = user_side.as_ref().unwrap();
        let item_side = item_side.as_ref().unwrap();
        let user_offset_of: HashMap<usize, usize> = user_side
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let item_offset_of: HashMap<usize, usize> = item_side
            .nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, i))
            .collect();
        let dim = cfg.embed_dim;
        let mut ou = Mat::zeros(triples.len(), dim);
        let mut op = Mat::zeros(triples.len(), dim);
        let mut on = Mat::zeros(triples.len(), dim);
        for (r, &(u, p, n)) in triples.iter().enumerate() {
            let uo = adversarial_offset(&user_side.boundary[user_offset_of[&u]], num_layers);
            if !uo.is_empty() {
                ou.row_mut(r).copy_from_slice(&uo);
            }
            let po = adversarial_offset(&item_side.boundary[item_offset_of[&p]], num_layers);
            if !po.is_empty() {
                op.row_mut(r).copy_from_slice(&po);
            }
            let no = adversarial_offset(&item_side.boundary[item_offset_of[&n]], num_layers);
            if !no.is_empty() {
                on.row_mut(r).copy_from_slice(&no);
            }
        }
        let id = bpr_loss_op(&mut tape, z_id, &triples, Some((&ou, &op, &on)));
        adv_val = tape.value(id).as_scalar();
        if !adv_val.is_finite() {
            return Err(TrainError::NonFinite {
                term: "adv",
                value: adv_val,
            });
        }
        adv_id = Some(id);
    }

    // multi-view contrastive loss
    let mut cl_id = None;
    let mut cl_val = 0.0;
    let mut cl_terms = [0.0; 6];
    if alpha > 0.0 {
        let mut term_ids = Vec::with_capacity(6);
        for (side_idx, side) in [user_side.as_ref().unwrap(), item_side.as_ref().unwrap()]
            .into_iter()
            .enumerate()
        {
            let base = tape.gather(z_id, side.nodes.clone());
            let v1 = tape.offset_rows(base, &side.offsets1);
            let v2 = tape.offset_rows(base, &side.offsets2);
            let t12 = infonce_op(&mut tape, v1, v2, cfg.tau);
            term_ids.push((side_idx * 3, t12));
            if build_ac {
                let vac = tape.offset_rows(base, side.offsets_ac.as_ref().unwrap());
                let t_ac1 = infonce_op(&mut tape, vac, v1, cfg.tau);
                let t_ac2 = infonce_op(&mut tape, vac, v2, cfg.tau);
                term_ids.push((side_idx * 3 + 1, t_ac1));
                term_ids.push((side_idx * 3 + 2, t_ac2));
            }
        }
        for &(slot, id) in &term_ids {
            let v = tape.value(id).as_scalar();
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    term: "cl",
                    value: v,
                });
            }
            cl_terms[slot] = v;
        }
        cl_val = cl_terms.iter().sum();
        cl_id = Some(tape.weighted_sum(term_ids.iter().map(|&(_, id)| (id, 1.0)).collect()));
    }

    // joint objective and one optimizer step
    let mut parts = vec![(bpr_id, 1.0)];
    if let Some(id) = adv_id {
        parts.push((id, mu));
    }
    if let Some(id) = cl_id {
        parts.push((id, alpha));
    }
    let total_id = tape.weighted_sum(parts);
    let breakdown = LossBreakdown::compose(bpr_val, adv_val, cl_val, cl_terms, mu, alpha, cfg.tau);
    if !breakdown.all_finite() {
        return Err(TrainError::NonFinite {
            term: "total",
            value: breakdown.total,
        });
    }

    let mut grads = tape.backward(total_id);
    let grad_e = grads.take(e_id).expect("embedding gradient exists");
    adam_step(emb, &grad_e, adam, cfg.learning_rate, cfg.weight_decay);
    Ok(breakdown)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub adv: f64,
    pub cl: f64,
    pub metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Best-validation snapshot of the embedding table, never the last
    /// epoch.
    pub embeddings: Mat,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
    pub epochs_run: usize,
    /// State as the loop left it; checkpoint this to resume later.
    pub final_state: TrainState,
}

/// Mutable training state; checkpointable and resumable.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub emb: Mat,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best_emb: Mat,
    pub best_metric: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig, num_nodes: usize) -> Self {
        let emb = init_embeddings(num_nodes, cfg.embed_dim, cfg.seed);
        TrainState {
            best_emb: emb.clone(),
            adam: AdamState::new(num_nodes, cfg.embed_dim),
            emb,
            next_epoch: 0,
            best_metric: None,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }
}

pub fn fit(cfg: &TrainConfig, ds: &ImplicitDataset) -> Result<FitResult, TrainError> {
    fit_with_options(cfg, ds, None, None)
}

/// Full epoch loop with optional resume state and constraint auditing.
pub fn fit_with_options(
    cfg: &TrainConfig,
    ds: &ImplicitDataset,
    resume: Option<TrainState>,
    mut audit: Option<&mut AuditStats>,
) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let adj = build_adjacency(ds);
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(cfg, adj.num_nodes()));
    let mut log = Vec::new();
    let k = cfg.eval_metric.k();

    for epoch in state.next_epoch..cfg.max_epochs {
        let started = Instant::now();
        let mut rng_batch = epoch_rng(cfg.seed, epoch, 0);
        let mut rng_aug = epoch_rng(cfg.seed, epoch, 1);
        let mut batches = EpochBatches::new(ds, cfg.batch_size, &mut rng_batch);
        let num_batches = batches.num_batches().max(1);
        let mut sums = (0.0, 0.0, 0.0);
        while let Some(batch) = batches.next_batch(ds, &mut rng_batch) {
            let breakdown = train_step(
                ds,
                &adj,
                cfg,
                &mut state.emb,
                &mut state.adam,
                &batch,
                &mut rng_aug,
                audit.as_deref_mut(),
            )?;
            sums.0 += breakdown.bpr;
            sums.1 += breakdown.adv;
            sums.2 += breakdown.cl;
        }

        let stack = crate::model::forward(&adj, &state.emb, cfg.num_layers);
        let z = crate::model::aggregate(&stack, None);
        let report = evaluate(&z, ds, EvalSplit::Valid, &[k]);
        let metric = match cfg.eval_metric {
            EvalMetric::Recall(_) => report.metric(k, false),
            EvalMetric::Ndcg(_) => report.metric(k, true),
        }
        .unwrap_or(0.0);
        let metric = if report.users_evaluated == 0 {
            f64::NEG_INFINITY
        } else {
            metric
        };

        log.push(EpochRecord {
            epoch,
            bpr: sums.0 / num_batches as f64,
            adv: sums.1 / num_batches as f64,
            cl: sums.2 / num_batches as f64,
            metric,
            seconds: started.elapsed().as_secs_f64(),
        });

        let improved = state.best_metric.map_or(true, |best| metric > best);
        if improved {
            state.best_metric = Some(metric);
            state.best_emb = state.emb.clone();
            state.best_epoch = epoch;
            state.bad_epochs = 0;
        } else {
            state.bad_epochs += 1;
            if state.bad_epochs >= cfg.patience {
                state.next_epoch = epoch + 1;
                break;
            }
        }
        state.next_epoch = epoch + 1;
    }

    Ok(FitResult {
        embeddings: state.best_emb.clone(),
        best_epoch: state.best_epoch,
        best_metric: state.best_metric.unwrap_or(f64::NEG_INFINITY),
        log,
        epochs_run: state.next_epoch,
        final_state: state,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RGCLCKP1";

/// Versioned binary snapshot of the full training state, tied to the
/// config by hash.
pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let put_u64 = |w: &mut dyn Write, v: u64| w.write_all(&v.to_le_bytes());
    put_u64(&mut w, cfg.hash64())?;
    put_u64(&mut w, state.emb.rows() as u64)?;
    put_u64(&mut w, state.emb.cols() as u64)?;
    put_u64(&mut w, state.next_epoch as u64)?;
    put_u64(&mut w, state.best_epoch as u64)?;
    put_u64(&mut w, state.bad_epochs as u64)?;
    put_u64(&mut w, state.adam.step)?;
    let best = state.best_metric.unwrap_or(f64::NEG_INFINITY);
    w.write_all(&best.to_le_bytes())?;
    for mat in [&state.emb, &state.best_emb, &state.adam.m, &state.adam.v] {
        for v in mat.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadCheckpoint("unrecognized header".into()));
    }
    let get_u64 = |r: &mut dyn Read| -> Result<u64, TrainError> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let hash = get_u64(&mut r)?;
    if hash != cfg.hash64() {
        return Err(TrainError::BadCheckpoint(
            "config hash does not match the checkpoint".into(),
        ));
    }
    let rows = get_u64(&mut r)? as usize;
    let cols = get_u64(&mut r)? as usize;
    let next_epoch = get_u64(&mut r)? as usize;
    let best_epoch = get_u64(&mut r)? as usize;
    let bad_epochs = get_u64(&mut r)? as usize;
    let step = get_u64(&mut r)?;
    let mut fbuf = [0u8; 8];
    r.read_exact(&mut fbuf)?;
    let best_raw = f64::from_le_bytes(fbuf);
    let best_metric = if best_raw == f64::NEG_INFINITY {
        None
    } else {
        Some(best_raw)
    };
    let read_mat = |r: &mut dyn Read| -> Result<Mat, TrainError> {
        let mut data = vec![0.0f64; rows * cols];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        Ok(Mat::from_vec(rows, cols, data))
    };
    let emb = read_mat(&mut r)?;
    let best_emb = read_mat(&mut r)?;
    let m = read_mat(&mut r)?;
    let v = read_mat(&mut r)?;
    Ok(TrainState {
        emb,
        adam: AdamState { m, v, step },
        next_epoch,
        best_emb,
        best_metric,
        best_epoch,
        bad_epochs,
    })
}
