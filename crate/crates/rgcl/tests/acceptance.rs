//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `--nocapture` to see them). Dataset-dependent criteria
//! (7 and 8) run only when the MovieLens files are present and print a
//! SKIP line otherwise; see the README for how to point the suite at
//! the data.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use rgcl::augment::{
    adversarial_contrastive, adversarial_offset, boundary_perturbation,
    margin_after_perturbation, random_draw, BoundaryPerturbation, ViewOptions,
};
use rgcl::dataset::{binarize, load_interactions, split, synthetic_pairs, EpochBatches, ImplicitDataset, Schema};
use rgcl::diff::{grad_check, Tape};
use rgcl::eval::{evaluate, full_rank, group_eval, metrics_at_k, EvalSplit};
use rgcl::graph::build_adjacency;
use rgcl::linalg::{dot, Mat};
use rgcl::losses::bpr_loss_op;
use rgcl::model::{aggregate, forward, init_embeddings};
use rgcl::trainer::{
    fit, fit_with_options, train_step, AdamState, AuditStats, EvalMetric, TrainConfig,
};

const MARGIN_TOL: f64 = 1e-8; // criterion 1
const GRAD_TOL: f64 = 1e-4; // criterion 2
const HARDNESS_TOL: f64 = 1e-5; // criterion 3
const BACKBONE_TOL: f64 = 1e-8; // criterion 5
const DECOMP_TOL: f64 = 1e-9; // criterion 6
const ML1M_BAND: f64 = 0.10; // criterion 7
const ML1M_RECALL20: f64 = 0.2680; // published backbone reference point
const ML1M_NDCG20: f64 = 0.2670;
const COMPLEXITY_FACTOR: f64 = 2.5; // criterion 9

fn random_dataset(
    rng: &mut ChaCha20Rng,
    max_nodes: usize,
) -> Option<(ImplicitDataset, rgcl::graph::NormalizedAdjacency)> {
    let m = rng.gen_range(3..=max_nodes / 2);
    let n = rng.gen_range(3..=(max_nodes - m));
    let edges = rng.gen_range((m.max(n))..=(m * n / 2).max(m.max(n) + 1));
    let pairs = synthetic_pairs(m, n, edges, rng.gen());
    let ds = split(&pairs, (1, 0, 0), rng.gen()).ok()?;
    let adj = build_adjacency(&ds);
    Some((ds, adj))
}

#[test]
fn criterion_1_margin_zeroing() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xC1);
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    while checked < 1000 {
        let Some((ds, adj)) = random_dataset(&mut rng, 30) else {
            continue;
        };
        let num_layers = rng.gen_range(1..=3usize);
        let dim = rng.gen_range(2..=16usize);
        let e = init_embeddings(adj.num_nodes(), dim, rng.gen());
        let stack = forward(&adj, &e, num_layers);
        let z = aggregate(&stack, None);
        let m = ds.num_users;
        for u in 0..ds.num_users {
            let positives = ds.train_positives(u as u32);
            if positives.is_empty() {
                continue;
            }
            let Some(neg) = (0..ds.num_items as u32).find(|i| !ds.has_train(u as u32, *i))
            else {
                continue;
            };
            let pos_node = m + positives[0] as usize;
            let neg_node = m + neg as usize;
            let bp = boundary_perturbation(&z, u, &[(pos_node, neg_node)], num_layers);
            if bp.degenerate {
                continue;
            }
            let layer = rng.gen_range(0..num_layers);
            let after = margin_after_perturbation(
                &z,
                u,
                pos_node,
                neg_node,
                &bp.per_layer[layer],
                num_layers,
            );
            worst = worst.max(after.abs());
            checked += 1;
        }
    }
    let pass = worst < MARGIN_TOL;
    println!(
        "criterion 1 (margin zeroing): {} — {checked} instances, max |g_after| = {worst:.3e} (tol {MARGIN_TOL:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "max |g_after| {worst} exceeds {MARGIN_TOL}");
}

/// Frozen per-instance constants for the gradient checks: the batch, the
/// perturbation offsets, and the weights. The loss is then a pure
/// function of the embedding table.
struct FrozenInstance {
    adj: rgcl::graph::NormalizedAdjacency,
    e0: Mat,
    num_layers: usize,
    tau: f64,
    mu: f64,
    alpha: f64,
    triples: Vec<(usize, usize, usize)>,
    user_nodes: Vec<usize>,
    item_nodes: Vec<usize>,
    user_offsets: [Mat; 3],
    item_offsets: [Mat; 3],
    adv_offsets: [Mat; 3],
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum LossKind {
    Bpr,
    Adv,
    Cl(usize),
    Joint,
}

impl FrozenInstance {
    fn build(seed: u64) -> Option<FrozenInstance> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (ds, adj) = random_dataset(&mut rng, 20)?;
        let num_layers = rng.gen_range(1..=2usize);
        let dim = rng.gen_range(2..=8usize);
        let tau = 0.2;
        let e0 = init_embeddings(adj.num_nodes(), dim, rng.gen());
        let stack = forward(&adj, &e0, num_layers);
        let z = aggregate(&stack, None);
        let m = ds.num_users;

        let mut batches = EpochBatches::new(&ds, 8, &mut rng);
        let batch = batches.next_batch(&ds, &mut rng)?;
        if batch.triples.is_empty() {
            return None;
        }
        let triples: Vec<(usize, usize, usize)> = batch
            .triples
            .iter()
            .map(|&(u, p, n)| (u as usize, m + p as usize, m + n as usize))
            .collect();
        let user_nodes: Vec<usize> = batch.users.iter().map(|&u| u as usize).collect();
        let item_nodes: Vec<usize> = batch.items.iter().map(|&i| m + i as usize).collect();

        let build_side = |nodes: &[usize],
                          rng: &mut ChaCha20Rng,
                          candidates: &dyn Fn(usize) -> Vec<(usize, usize)>|
         -> (Vec<BoundaryPerturbation>, [Mat; 3]) {
            let dim = e0.cols();
            let mut boundary = Vec::new();
            let mut off1 = Mat::zeros(nodes.len(), dim);
            let mut off2 = Mat::zeros(nodes.len(), dim);
            let mut draws_ac = Vec::new();
            let mut partner = Vec::new();
            for (r, &node) in nodes.iter().enumerate() {
                let cand = candidates(node);
                let bp = if cand.is_empty() {
                    BoundaryPerturbation::zero(num_layers, dim)
                } else {
                    boundary_perturbation(&z, node, &cand, num_layers)
                };
                let d1 = random_draw(&stack, node, &bp, 0.1, rng, ViewOptions::default());
                let d2 = random_draw(&stack, node, &bp, 0.1, rng, ViewOptions::default());
                let dac = random_draw(&stack, node, &bp, 0.1, rng, ViewOptions::default());
                off1.row_mut(r).copy_from_slice(&d1.offset(num_layers));
                let o2 = d2.offset(num_layers);
                off2.row_mut(r).copy_from_slice(&o2);
                partner.push(o2);
                draws_ac.push(dac);
                boundary.push(bp);
            }
            let bounds: Vec<f64> = boundary.iter().map(|b| b.bound).collect();
            let ac = adversarial_contrastive(
                &z, nodes, &draws_ac, &partner, &bounds, tau, num_layers,
            );
            let mut offac = Mat::zeros(nodes.len(), dim);
            for (r, o) in ac.offsets.iter().enumerate() {
                offac.row_mut(r).copy_from_slice(o);
            }
            (boundary, [off1, off2, offac])
        };

        let triples_by_user: std::collections::HashMap<usize, Vec<(usize, usize)>> = {
            let mut map: std::collections::HashMap<usize, Vec<(usize, usize)>> =
                std::collections::HashMap::new();
            for &(u, p, n) in &triples {
                map.entry(u).or_default().push((p, n));
            }
            map
        };
        let (user_boundary, user_offsets) = build_side(&user_nodes, &mut rng, &|node| {
            triples_by_user.get(&node).cloned().unwrap_or_default()
        });
        let item_interactors: std::collections::HashMap<usize, Vec<usize>> = {
            let mut map: std::collections::HashMap<usize, Vec<usize>> =
                std::collections::HashMap::new();
            for &u in &batch.users {
                for &i in ds.train_positives(u) {
                    let node = m + i as usize;
                    if item_nodes.contains(&node) {
                        map.entry(node).or_default().push(u as usize);
                    }
                }
            }
            map
        };
        let batch_users = batch.users.clone();
        let ds_ref = &ds;
        let (item_boundary, item_offsets) = build_side(&item_nodes, &mut rng, &|node| {
            let Some(pos) = item_interactors.get(&node) else {
                return Vec::new();
            };
            let item = (node - m) as u32;
            let negs: Vec<usize> = batch_users
                .iter()
                .filter(|&&u| !ds_ref.has_train(u, item))
                .map(|&u| u as usize)
                .collect();
            let mut out = Vec::new();
            for &p in pos.iter().take(2) {
                for &n in negs.iter().take(2) {
                    out.push((p, n));
                }
            }
            out
        });

        // adversarial offsets aligned with triples
        let dim = e0.cols();
        let mut adv_u = Mat::zeros(triples.len(), dim);
        let mut adv_p = Mat::zeros(triples.len(), dim);
        let mut adv_n = Mat::zeros(triples.len(), dim);
        let user_idx: std::collections::HashMap<usize, usize> =
            user_nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        let item_idx: std::collections::HashMap<usize, usize> =
            item_nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        for (r, &(u, p, n)) in triples.iter().enumerate() {
            adv_u
                .row_mut(r)
                .copy_from_slice(&adversarial_offset(&user_boundary[user_idx[&u]], num_layers));
            adv_p
                .row_mut(r)
                .copy_from_slice(&adversarial_offset(&item_boundary[item_idx[&p]], num_layers));
            adv_n
                .row_mut(r)
                .copy_from_slice(&adversarial_offset(&item_boundary[item_idx[&n]], num_layers));
        }

        let _ = &ds;
        Some(FrozenInstance {
            adj,
            e0,
            num_layers,
            tau,
            mu: 0.1,
            alpha: 0.05,
            triples,
            user_nodes,
            item_nodes,
            user_offsets,
            item_offsets,
            adv_offsets: [adv_u, adv_p, adv_n],
        })
    }

    fn loss_and_grad(&self, kind: LossKind, e_data: &[f64]) -> (f64, Option<Vec<f64>>) {
        let dim = self.e0.cols();
        let e = Mat::from_vec(self.e0.rows(), dim, e_data.to_vec());
        let mut tape = Tape::with_adjacency(&self.adj);
        let e_id = tape.leaf(e);
        let mut h = vec![e_id];
        for _ in 0..self.num_layers {
            h.push(tape.propagate(*h.last().unwrap()));
        }
        let z_id = tape.mean_rows(h);

        let cl_term = |tape: &mut Tape, slot: usize| -> rgcl::diff::ValueId {
            let (nodes, offsets) = if slot < 3 {
                (&self.user_nodes, &self.user_offsets)
            } else {
                (&self.item_nodes, &self.item_offsets)
            };
            let base = tape.gather(z_id, nodes.clone());
            let v1 = tape.offset_rows(base, &offsets[0]);
            let v2 = tape.offset_rows(base, &offsets[1]);
            let vac = tape.offset_rows(base, &offsets[2]);
            let (x, y) = match slot % 3 {
                0 => (v1, v2),
                1 => (vac, v1),
                _ => (vac, v2),
            };
            rgcl::losses::infonce_op(tape, x, y, self.tau)
        };

        let out = match kind {
            LossKind::Bpr => bpr_loss_op(&mut tape, z_id, &self.triples, None),
            LossKind::Adv => bpr_loss_op(
                &mut tape,
                z_id,
                &self.triples,
                Some((&self.adv_offsets[0], &self.adv_offsets[1], &self.adv_offsets[2])),
            ),
            LossKind::Cl(slot) => cl_term(&mut tape, slot),
            LossKind::Joint => {
                let bpr = bpr_loss_op(&mut tape, z_id, &self.triples, None);
                let adv = bpr_loss_op(
                    &mut tape,
                    z_id,
                    &self.triples,
                    Some((&self.adv_offsets[0], &self.adv_offsets[1], &self.adv_offsets[2])),
                );
                let mut terms = vec![(bpr, 1.0), (adv, self.mu)];
                for slot in 0..6 {
                    let id = cl_term(&mut tape, slot);
                    terms.push((id, self.alpha));
                }
                tape.weighted_sum(terms)
            }
        };
        let value = tape.value(out).as_scalar();
        let grads = tape.backward(out);
        let grad = grads.wrt(e_id).map(|g| g.data().to_vec());
        (value, grad)
    }
}

#[test]
fn criterion_2_gradient_correctness() {
    let started = Instant::now();
    let kinds = [
        LossKind::Bpr,
        LossKind::Adv,
        LossKind::Cl(0),
        LossKind::Cl(1),
        LossKind::Cl(2),
        LossKind::Cl(3),
        LossKind::Cl(4),
        LossKind::Cl(5),
        LossKind::Joint,
    ];
    let mut worst: f64 = 0.0;
    let mut instances = 0usize;
    let mut seed = 0u64;
    while instances < 100 {
        seed += 1;
        let Some(inst) = FrozenInstance::build(0x200 + seed) else {
            continue;
        };
        instances += 1;
        let point = inst.e0.data().to_vec();
        for kind in kinds {
            let (_, grad) = inst.loss_and_grad(kind, &point);
            let grad = grad.expect("gradient exists");
            let err = grad_check(
                |p| inst.loss_and_grad(kind, p).0,
                &point,
                &grad,
                1e-4,
            );
            assert!(
                err < GRAD_TOL,
                "instance {seed} loss {kind:?}: grad error {err}"
            );
            worst = worst.max(err);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst < GRAD_TOL && elapsed < 60.0;
    println!(
        "criterion 2 (gradient correctness): {} — 100 instances x 9 losses, max rel err = {worst:.3e} (tol {GRAD_TOL:.0e}), {elapsed:.1}s (< 60s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "worst {worst}, elapsed {elapsed}");
}

#[test]
fn criterion_3_hardness_identity() {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha20Rng::seed_from_u64(0x300);
    for &tau in &[0.1, 0.2, 1.0] {
        for _ in 0..20 {
            let n = rng.gen_range(2..=8usize);
            let s = Mat::from_vec(
                n,
                n,
                (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            // phi_i as a function of row i of the similarity matrix
            let phi = |row: &[f64], i: usize| -> f64 {
                let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
                let lse = m + row.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln();
                lse - row[i] / tau
            };
            for i in 0..n {
                let row = s.row(i).to_vec();
                // softmax probabilities of row i
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
                let zsum: f64 = row.iter().map(|&v| (v / tau - mx).exp()).sum();
                let p: Vec<f64> = row.iter().map(|&v| (v / tau - mx).exp() / zsum).collect();
                let h = 1e-6;
                for j in 0..n {
                    let mut up = row.clone();
                    up[j] += h;
                    let mut down = row.clone();
                    down[j] -= h;
                    let central = (phi(&up, i) - phi(&down, i)) / (2.0 * h);
                    let analytic = if j == i {
                        (p[i] - 1.0) / tau
                    } else {
                        p[j] / tau
                    };
                    worst = worst.max((central - analytic).abs());
                    // loss is monotone increasing in off-diagonal sims
                    if j != i {
                        assert!(phi(&up, i) > phi(&row, i));
                    }
                }
            }
        }
    }
    let pass = worst < HARDNESS_TOL;
    println!(
        "criterion 3 (hardness identity): {} — max |FD - closed form| = {worst:.3e} (tol {HARDNESS_TOL:.0e}) over tau in {{0.1, 0.2, 1.0}}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "worst {worst}");
}

#[test]
fn criterion_4_constraint_soundness() {
    let mut audit = AuditStats::new(1000);
    for seed in [1u64, 2] {
        let pairs = synthetic_pairs(40, 30, 380, seed);
        let ds = split(&pairs, (8, 1, 1), seed).unwrap();
        let cfg = TrainConfig {
            embed_dim: 16,
            num_layers: if seed == 1 { 2 } else { 1 },
            batch_size: 64,
            learning_rate: 5e-3,
            alpha: 0.05,
            mu: 0.1,
            epsilon: 0.1,
            tau: 0.2,
            max_epochs: 3,
            patience: 10,
            seed,
            ..TrainConfig::default()
        };
        fit_with_options(&cfg, &ds, None, Some(&mut audit)).unwrap();
    }
    let pass = audit.total_violations() == 0
        && audit.projection_checks > 0
        && audit.eta_checks > 0
        && audit.fgsm_checks > 0;
    println!(
        "criterion 4 (constraint soundness): {} — {} projection, {} eta, {} FGSM checks (1000 draws each), {} violations",
        if pass { "PASS" } else { "FAIL" },
        audit.projection_checks,
        audit.eta_checks,
        audit.fgsm_checks,
        audit.total_violations()
    );
    assert!(pass);
}

/// Independently coded plain linear-propagation + pairwise-ranking
/// reference used to pin the backbone path: dense adjacency powers,
/// hand-derived gradient, its own Adam. No code is shared with the
/// library implementation beyond the initial embedding values.
mod reference {
    pub struct Dense {
        pub n: usize,
        pub a: Vec<Vec<f64>>,
    }

    pub fn dense_adjacency(
        num_users: usize,
        num_items: usize,
        train: &[(u32, u32)],
    ) -> Dense {
        let n = num_users + num_items;
        let mut deg = vec![0usize; n];
        for &(u, i) in train {
            deg[u as usize] += 1;
            deg[num_users + i as usize] += 1;
        }
        let mut a = vec![vec![0.0; n]; n];
        for &(u, i) in train {
            let iu = u as usize;
            let ii = num_users + i as usize;
            let w = 1.0 / ((deg[iu] * deg[ii]) as f64).sqrt();
            a[iu][ii] = w;
            a[ii][iu] = w;
        }
        Dense { n, a }
    }

    pub fn matmul(a: &Dense, h: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = h[0].len();
        let mut out = vec![vec![0.0; d]; a.n];
        for r in 0..a.n {
            for c in 0..a.n {
                let w = a.a[r][c];
                if w != 0.0 {
                    for k in 0..d {
                        out[r][k] += w * h[c][k];
                    }
                }
            }
        }
        out
    }

    pub struct RefAdam {
        pub m: Vec<Vec<f64>>,
        pub v: Vec<Vec<f64>>,
        pub t: u32,
    }

    /// One ranking-loss step: forward `L` dense propagations, mean
    /// aggregation, summed log-sigmoid pairwise loss, reverse pass by
    /// hand, bias-corrected Adam.
    #[allow(clippy::needless_range_loop)]
    pub fn step(
        e: &mut [Vec<f64>],
        a: &Dense,
        layers: usize,
        triples: &[(usize, usize, usize)],
        adam: &mut RefAdam,
        lr: f64,
    ) {
        let n = a.n;
        let d = e[0].len();
        let mut stack = vec![e.to_vec()];
        for _ in 0..layers {
            stack.push(matmul(a, stack.last().unwrap()));
        }
        let scale = 1.0 / (layers as f64 + 1.0);
        let mut z = vec![vec![0.0; d]; n];
        for h in &stack {
            for r in 0..n {
                for k in 0..d {
                    z[r][k] += scale * h[r][k];
                }
            }
        }
        let mut gz = vec![vec![0.0; d]; n];
        for &(u, p, q) in triples {
            let mut x = 0.0;
            for k in 0..d {
                x += z[u][k] * (z[p][k] - z[q][k]);
            }
            let sig = if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let t = x.exp();
                t / (1.0 + t)
            };
            let c = sig - 1.0;
            for k in 0..d {
                gz[u][k] += c * (z[p][k] - z[q][k]);
                gz[p][k] += c * z[u][k];
                gz[q][k] -= c * z[u][k];
            }
        }
        // dE = (1/(L+1)) * sum_l A^l gz
        let mut ge = vec![vec![0.0; d]; n];
        let mut cur = gz;
        for l in 0..=layers {
            for r in 0..n {
                for k in 0..d {
                    ge[r][k] += scale * cur[r][k];
                }
            }
            if l < layers {
                cur = matmul(a, &cur);
            }
        }
        adam.t += 1;
        let b1: f64 = 0.9;
        let b2: f64 = 0.999;
        let eps = 1e-8;
        let bc1 = 1.0 - b1.powi(adam.t as i32);
        let bc2 = 1.0 - b2.powi(adam.t as i32);
        for r in 0..n {
            for k in 0..d {
                let g = ge[r][k];
                adam.m[r][k] = b1 * adam.m[r][k] + (1.0 - b1) * g;
                adam.v[r][k] = b2 * adam.v[r][k] + (1.0 - b2) * g * g;
                let mh = adam.m[r][k] / bc1;
                let vh = adam.v[r][k] / bc2;
                e[r][k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[test]
fn criterion_5_backbone_equivalence() {
    let pairs = synthetic_pairs(5, 5, 12, 0x500);
    let ds = split(&pairs, (1, 0, 0), 0x500).unwrap();
    let adj = build_adjacency(&ds);
    let n = adj.num_nodes();
    assert!(n <= 10, "instance has {n} nodes");
    let dim = 4;
    let layers = 2;
    let lr = 0.01;
    let cfg = TrainConfig {
        embed_dim: dim,
        num_layers: layers,
        batch_size: 8,
        learning_rate: lr,
        alpha: 0.0,
        mu: 0.0,
        epsilon: 0.1,
        tau: 0.2,
        ..TrainConfig::default()
    };

    let e0 = init_embeddings(n, dim, 7);
    let mut ours = e0.clone();
    let mut ours_adam = AdamState::new(n, dim);
    let mut theirs: Vec<Vec<f64>> = (0..n).map(|r| e0.row(r).to_vec()).collect();
    let dense = reference::dense_adjacency(ds.num_users, ds.num_items, &ds.train);
    let mut their_adam = reference::RefAdam {
        m: vec![vec![0.0; dim]; n],
        v: vec![vec![0.0; dim]; n],
        t: 0,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut aug_rng = ChaCha20Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for step in 0..20 {
        // shared batch for both implementations
        let mut batches = EpochBatches::new(&ds, cfg.batch_size, &mut rng);
        let batch = batches.next_batch(&ds, &mut rng).unwrap();
        let m = ds.num_users;
        let triples: Vec<(usize, usize, usize)> = batch
            .triples
            .iter()
            .map(|&(u, p, q)| (u as usize, m + p as usize, m + q as usize))
            .collect();
        train_step(
            &ds,
            &adj,
            &cfg,
            &mut ours,
            &mut ours_adam,
            &batch,
            &mut aug_rng,
            None,
        )
        .unwrap();
        reference::step(&mut theirs, &dense, layers, &triples, &mut their_adam, lr);
        for r in 0..n {
            for k in 0..dim {
                worst = worst.max((ours.get(r, k) - theirs[r][k]).abs());
            }
        }
        let _ = step;
    }
    let pass = worst < BACKBONE_TOL;
    println!(
        "criterion 5 (backbone equivalence): {} — 20 steps on a {n}-node instance, max |dE| = {worst:.3e} (tol {BACKBONE_TOL:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "max divergence {worst}");
}

#[test]
fn criterion_6_metric_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(0x600);
    // 200 tiny ranking cases against an exhaustively computed oracle
    for case in 0..200 {
        let num_items = rng.gen_range(1..=6usize);
        let dim = 3;
        let mut z = Mat::zeros(1 + num_items, dim);
        // discrete score levels force ties through the ranking path
        for r in 0..1 + num_items {
            for c in 0..dim {
                let level: i32 = rng.gen_range(-2..=2);
                z.set(r, c, level as f64 * 0.5);
            }
        }
        let mask: Vec<u32> = (0..num_items as u32).filter(|_| rng.gen_bool(0.2)).collect();
        let candidates: Vec<u32> =
            (0..num_items as u32).filter(|i| mask.binary_search(i).is_err()).collect();
        if candidates.is_empty() {
            continue;
        }
        let mut targets: Vec<u32> = candidates
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.5))
            .collect();
        if targets.is_empty() {
            targets.push(candidates[0]);
        }
        targets.sort_unstable();
        let k = rng.gen_range(1..=6usize);

        let ranked = full_rank(&z, 1, 0, &mask);
        // oracle ranking: selection by exhaustive max scan
        let mut remaining: Vec<u32> = candidates.clone();
        let mut oracle_rank = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0usize;
            for idx in 1..remaining.len() {
                let s_best = dot(z.row(0), z.row(1 + remaining[best] as usize));
                let s_cur = dot(z.row(0), z.row(1 + remaining[idx] as usize));
                if s_cur > s_best || (s_cur == s_best && remaining[idx] < remaining[best]) {
                    best = idx;
                }
            }
            oracle_rank.push(remaining.remove(best));
        }
        assert_eq!(ranked, oracle_rank, "case {case}: ranking mismatch");

        let (recall, ndcg) = metrics_at_k(&ranked, &targets, k);
        // oracle metrics straight from the definitions
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (pos, item) in oracle_rank.iter().take(k).enumerate() {
            if targets.contains(item) {
                hits += 1;
                dcg += 1.0 / ((pos as f64 + 2.0).log2());
            }
        }
        let or = hits as f64 / targets.len() as f64;
        let mut idcg = 0.0;
        for t in 0..targets.len().min(k) {
            idcg += 1.0 / ((t as f64 + 2.0).log2());
        }
        let on = dcg / idcg;
        assert_eq!(recall, or, "case {case}: recall mismatch");
        assert_eq!(ndcg, on, "case {case}: ndcg mismatch");
    }

    // decomposed item-group recall sums to the ungrouped truncated value
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let pairs = synthetic_pairs(14, 11, 70, seed);
        let Ok(ds) = split(&pairs, (8, 1, 1), seed) else {
            continue;
        };
        if ds.test.is_empty() {
            continue;
        }
        let adj = build_adjacency(&ds);
        let e = init_embeddings(adj.num_nodes(), 5, seed);
        let z = aggregate(&forward(&adj, &e, 2), None);
        for k in [2, 5, 20] {
            let report = group_eval(&z, &ds, k);
            let sum_r: f64 = report.item_groups.iter().map(|g| g.recall).sum();
            let sum_n: f64 = report.item_groups.iter().map(|g| g.ndcg).sum();
            worst = worst.max((sum_r - report.overall_decomposed_recall).abs());
            worst = worst.max((sum_n - report.overall_decomposed_ndcg).abs());
        }
    }
    let pass = worst < DECOMP_TOL;
    println!(
        "criterion 6 (metric oracle): {} — 200 ranking cases exact, decomposition residual {worst:.3e} (tol {DECOMP_TOL:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass);
}

fn find_dataset(env_key: &str, relative: &[&str]) -> Option<std::path::PathBuf> {
    if let Ok(path) = std::env::var(env_key) {
        let p = std::path::PathBuf::from(path);
        if p.exists() {
            return Some(p);
        }
    }
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for rel in relative {
        let p = root.join(rel);
        if p.exists() {
            return Some(p);
        }
    }
    None
}

fn prepare_ml1m(path: &std::path::Path) -> ImplicitDataset {
    let schema = Schema::parse("user,item,rating,timestamp")
        .unwrap()
        .with_delimiter("::");
    let raw = load_interactions(path, &schema).expect("readable ratings file");
    let pairs = binarize(&raw, 3.0);
    split(&pairs, (8, 1, 1), 42).expect("splittable dataset")
}

fn run_config(ds: &ImplicitDataset, cfg: &TrainConfig) -> (f64, f64) {
    let result = fit(cfg, ds).unwrap();
    let adj = build_adjacency(ds);
    let z = aggregate(&forward(&adj, &result.embeddings, cfg.num_layers), None);
    let report = evaluate(&z, ds, EvalSplit::Test, &[20]);
    (
        report.metric(20, false).unwrap(),
        report.metric(20, true).unwrap(),
    )
}

#[test]
fn criterion_7_and_8_ml1m_reproduction() {
    let Some(path) = find_dataset(
        "RGCL_ML1M",
        &["data/ml-1m/ratings.dat", "data/ratings.dat"],
    ) else {
        println!(
            "criterion 7 (ML-1M desk-scale reproduction): SKIP — dataset not present; set RGCL_ML1M=/path/to/ratings.dat or place it under data/ml-1m/"
        );
        println!("criterion 8 (ablation ordering): SKIP — dataset not present (same data as criterion 7)");
        return;
    };
    let ds = prepare_ml1m(&path);
    println!(
        "ml-1m prepared: {} users, {} items, {} interactions",
        ds.num_users,
        ds.num_items,
        ds.num_interactions()
    );
    let base = TrainConfig {
        embed_dim: 64,
        num_layers: 2,
        batch_size: 4096,
        learning_rate: 1e-3,
        alpha: 0.0,
        mu: 0.0,
        epsilon: 0.1,
        tau: 0.2,
        max_epochs: 100,
        patience: 10,
        eval_metric: EvalMetric::Recall(20),
        ..TrainConfig::default()
    };
    let rgcl_cfg = TrainConfig {
        alpha: 1e-2,
        mu: 0.1,
        ..base.clone()
    };
    let seeds = [1u64, 2, 3];
    let mut baseline = Vec::new();
    let mut full = Vec::new();
    for &seed in &seeds {
        let started = Instant::now();
        let b = run_config(&ds, &TrainConfig { seed, ..base.clone() });
        let r = run_config(&ds, &TrainConfig { seed, ..rgcl_cfg.clone() });
        println!(
            "seed {seed}: baseline R@20={:.4} N@20={:.4}, full R@20={:.4} N@20={:.4} ({:.0}s)",
            b.0,
            b.1,
            r.0,
            r.1,
            started.elapsed().as_secs_f64()
        );
        baseline.push(b);
        full.push(r);
    }
    let mean_recall: f64 = baseline.iter().map(|b| b.0).sum::<f64>() / 3.0;
    let mean_ndcg: f64 = baseline.iter().map(|b| b.1).sum::<f64>() / 3.0;
    let band_ok = (mean_recall - ML1M_RECALL20).abs() <= ML1M_BAND * ML1M_RECALL20
        && (mean_ndcg - ML1M_NDCG20).abs() <= ML1M_BAND * ML1M_NDCG20;
    let wins = baseline
        .iter()
        .zip(full.iter())
        .filter(|(b, r)| r.0 > b.0 && r.1 > b.1)
        .count();
    let pass7 = band_ok && wins >= 2;
    println!(
        "criterion 7 (ML-1M desk-scale reproduction): {} — baseline mean R@20={mean_recall:.4} (band {:.4}±10%), N@20={mean_ndcg:.4} (band {:.4}±10%), full beats baseline on {wins}/3 seeds",
        if pass7 { "PASS" } else { "FAIL" },
        ML1M_RECALL20,
        ML1M_NDCG20
    );

    // criterion 8: each ablation scores <= full for the majority of seeds
    let mut all_ordered = true;
    for (name, variant) in [
        ("no_cons", TrainConfig { no_cons: true, ..rgcl_cfg.clone() }),
        ("no_rand", TrainConfig { no_rand: true, ..rgcl_cfg.clone() }),
        ("no_ac", TrainConfig { no_ac: true, ..rgcl_cfg.clone() }),
        ("no_adv", TrainConfig { no_adv: true, ..rgcl_cfg.clone() }),
    ] {
        let mut wins = 0usize;
        for (idx, &seed) in seeds.iter().enumerate() {
            let v = run_config(&ds, &TrainConfig { seed, ..variant.clone() });
            if v.0 <= full[idx].0 {
                wins += 1;
            }
            println!("ablation {name} seed {seed}: R@20={:.4} (full {:.4})", v.0, full[idx].0);
        }
        if wins < 2 {
            all_ordered = false;
        }
    }
    println!(
        "criterion 8 (ablation ordering): {}",
        if all_ordered { "PASS" } else { "FAIL" }
    );
    assert!(pass7, "criterion 7 failed");
    assert!(all_ordered, "criterion 8 failed");
}

#[test]
fn criterion_7_smoke_ml100k_budget() {
    let Some(path) = find_dataset("RGCL_ML100K", &["data/ml-100k/u.data", "data/u.data"]) else {
        println!(
            "criterion 7 smoke (MovieLens-100K <= 5 min): SKIP — dataset not present; set RGCL_ML100K=/path/to/u.data or place it under data/ml-100k/"
        );
        return;
    };
    let started = Instant::now();
    let schema = Schema::parse("user,item,rating,timestamp").unwrap();
    let raw = load_interactions(&path, &schema).unwrap();
    let pairs = binarize(&raw, 3.0);
    let ds = split(&pairs, (8, 1, 1), 42).unwrap();
    let cfg = TrainConfig {
        embed_dim: 64,
        num_layers: 2,
        batch_size: 4096,
        learning_rate: 1e-3,
        alpha: 1e-2,
        mu: 0.1,
        max_epochs: 30,
        patience: 5,
        ..TrainConfig::default()
    };
    let (recall, ndcg) = run_config(&ds, &cfg);
    let elapsed = started.elapsed().as_secs_f64();
    let pass = elapsed <= 300.0;
    println!(
        "criterion 7 smoke (MovieLens-100K): {} — R@20={recall:.4} N@20={ndcg:.4} in {elapsed:.0}s (<= 300s)",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "smoke run took {elapsed}s");
}

/// Clustered interactions with learnable structure: users and items
/// carry latent groups and most interactions stay within a group.
fn clustered_pairs(
    num_users: usize,
    num_items: usize,
    num_edges: usize,
    groups: usize,
    seed: u64,
) -> Vec<(String, String)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(num_edges);
    while out.len() < num_edges {
        let u = rng.gen_range(0..num_users);
        let i = if rng.gen_bool(0.85) {
            let g = u % groups;
            let per_group = num_items / groups;
            g * per_group + rng.gen_range(0..per_group)
        } else {
            rng.gen_range(0..num_items)
        };
        if seen.insert((u, i)) {
            out.push((format!("u{u}"), format!("i{i}")));
        }
    }
    out
}

/// Not a numbered criterion: end-to-end sanity that training moves the
/// ranking metric well above the untrained starting point on synthetic
/// data with learnable structure, exercising the full feature set.
#[test]
fn supplementary_synthetic_end_to_end() {
    let pairs = clustered_pairs(60, 120, 1200, 6, 99);
    let ds = split(&pairs, (8, 1, 1), 99).unwrap();
    let adj = build_adjacency(&ds);
    let cfg = TrainConfig {
        embed_dim: 16,
        num_layers: 2,
        batch_size: 128,
        learning_rate: 5e-3,
        alpha: 0.02,
        mu: 0.1,
        epsilon: 0.1,
        tau: 0.2,
        max_epochs: 40,
        patience: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let e0 = init_embeddings(adj.num_nodes(), cfg.embed_dim, cfg.seed);
    let z0 = aggregate(&forward(&adj, &e0, cfg.num_layers), None);
    let before = evaluate(&z0, &ds, EvalSplit::Test, &[20]);
    let result = fit(&cfg, &ds).unwrap();
    let z1 = aggregate(&forward(&adj, &result.embeddings, cfg.num_layers), None);
    let after = evaluate(&z1, &ds, EvalSplit::Test, &[20]);
    let (b, a) = (
        before.metric(20, false).unwrap(),
        after.metric(20, false).unwrap(),
    );
    println!("supplementary end-to-end: untrained R@20={b:.4} -> trained R@20={a:.4}");
    assert!(a > b, "training failed to improve recall: {b} -> {a}");
}

/// Not a numbered criterion: margin distributions of the full model and
/// the no-adversarial variant on a converged small run, reported side by
/// side for inspection (no pass/fail threshold).
#[test]
fn supplementary_margin_comparison() {
    let pairs = synthetic_pairs(16, 14, 110, 123);
    let ds = split(&pairs, (8, 1, 1), 123).unwrap();
    let adj = build_adjacency(&ds);
    let base = TrainConfig {
        embed_dim: 8,
        num_layers: 2,
        batch_size: 32,
        learning_rate: 5e-3,
        alpha: 0.02,
        mu: 0.1,
        max_epochs: 30,
        patience: 30,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut summaries = Vec::new();
    for (name, cfg) in [
        ("rgcl", base.clone()),
        ("no_adv", TrainConfig { no_adv: true, ..base.clone() }),
    ] {
        let result = fit(&cfg, &ds).unwrap();
        let z = aggregate(&forward(&adj, &result.embeddings, cfg.num_layers), None);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let summary =
            rgcl::eval::measure_margins(&z, &ds, cfg.num_layers, ds.num_users, 5, &mut rng);
        println!(
            "margin diagnostic [{name}]: mean={:.5} median={:.5} (n={}, degenerate={})",
            summary.mean, summary.median, summary.count, summary.degenerate
        );
        assert!(summary.mean >= 0.0);
        summaries.push(summary);
    }
}

#[test]
fn criterion_9_complexity_smoke() {
    // fixed node set and batch size; only the edge count doubles
    let run = |edges: usize| -> f64 {
        let pairs = synthetic_pairs(900, 700, edges, 0x900);
        let ds = split(&pairs, (1, 0, 0), 0x900).unwrap();
        let cfg = TrainConfig {
            embed_dim: 16,
            num_layers: 2,
            batch_size: 512,
            learning_rate: 5e-3,
            alpha: 0.02,
            mu: 0.1,
            max_epochs: 3,
            patience: 10,
            ..TrainConfig::default()
        };
        let result = fit(&cfg, &ds).unwrap();
        result
            .log
            .iter()
            .map(|r| r.seconds)
            .fold(f64::INFINITY, f64::min)
    };
    // warm up the thread pool so the first measurement is comparable
    let _ = run(2000);
    let small = run(12_000);
    let large = run(24_000);
    let factor = large / small;
    let pass = factor < COMPLEXITY_FACTOR;
    println!(
        "criterion 9 (complexity smoke): {} — doubling |E| (12k -> 24k at fixed B) costs x{factor:.2} per epoch (< {COMPLEXITY_FACTOR})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "per-epoch factor {factor}");
}
