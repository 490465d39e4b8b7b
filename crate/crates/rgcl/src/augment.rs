//! Perturbation mathematics: decision-boundary perturbations, bounded
//! random view draws with elementwise projection, adversarial-contrastive
//! view directions, and adversarial examples.
//!
//! All quantities live in the per-layer representation space. Under mean
//! aggregation a perturbation injected at any single layer enters the
//! final representation with the same `1/(L+1)` coefficient, so the
//! boundary direction `f` is layer-independent and one boundary vector
//! serves every layer; it is still stored per layer to keep the
//! aggregate bookkeeping explicit.

use rand::Rng;

use crate::diff::Tape;
use crate::linalg::{dot, l1_norm, l2_norm, linf_norm, sign, Mat};
use crate::model::LayerStack;

/// Degenerate-direction floor for `‖f‖₁`.
pub const F_NORM_FLOOR: f64 = 1e-12;

/// Boundary perturbation for one node: the smallest displacement (per
/// layer) that moves the selected ranking pair onto the decision
/// boundary.
#[derive(Debug, Clone)]
pub struct BoundaryPerturbation {
    /// `Δ^(k)` for layers `1..=L` (identical under mean aggregation).
    pub per_layer: Vec<Vec<f64>>,
    /// `δ = ‖Δ‖_∞ = |g|/‖f‖₁`; zero when degenerate.
    pub bound: f64,
    /// Margin `g` at the selected pair, zero perturbation.
    pub margin: f64,
    /// Selected `(positive, negative)` partner node indices.
    pub selected: (usize, usize),
    /// True when every candidate pair had `f ≈ 0`.
    pub degenerate: bool,
}

impl BoundaryPerturbation {
    pub fn zero(num_layers: usize, dim: usize) -> Self {
        BoundaryPerturbation {
            per_layer: vec![vec![0.0; dim]; num_layers],
            bound: 0.0,
            margin: 0.0,
            selected: (usize::MAX, usize::MAX),
            degenerate: true,
        }
    }

    /// Elementwise absolute bound `|Δ^(l)|` for one layer.
    pub fn abs_layer(&self, layer: usize) -> Vec<f64> {
        self.per_layer[layer - 1].iter().map(|v| v.abs()).collect()
    }
}

/// Pairwise ranking margin and its gradient with respect to a layer-space
/// perturbation of the anchor: `g = <Z_a, Z_pos - Z_neg>` and
/// `f = (Z_pos - Z_neg)/(L+1)`.
pub fn pairwise_margin(
    z: &Mat,
    anchor: usize,
    pos: usize,
    neg: usize,
    num_layers: usize,
) -> (f64, Vec<f64>) {
    let scale = 1.0 / (num_layers as f64 + 1.0);
    let za = z.row(anchor);
    let zp = z.row(pos);
    let zn = z.row(neg);
    let mut f = Vec::with_capacity(z.cols());
    let mut g = 0.0;
    for c in 0..z.cols() {
        let diff = zp[c] - zn[c];
        g += za[c] * diff;
        f.push(diff * scale);
    }
    (g, f)
}

/// Select the candidate pair minimizing `|g|/‖f‖₁` and build the
/// boundary perturbation `Δ = -(g/‖f‖₁)·sign(f)` shared by layers
/// `1..=L`. Candidates whose direction is degenerate (`‖f‖₁ ≤ floor`)
/// are skipped; if every candidate is degenerate the zero perturbation
/// is returned with its flag set.
pub fn boundary_perturbation(
    z: &Mat,
    anchor: usize,
    candidates: &[(usize, usize)],
    num_layers: usize,
) -> BoundaryPerturbation {
    assert!(!candidates.is_empty(), "candidate pair set is empty");
    let mut best: Option<(f64, f64, Vec<f64>, (usize, usize))> = None;
    for &(pos, neg) in candidates {
        let (g, f) = pairwise_margin(z, anchor, pos, neg, num_layers);
        let f1 = l1_norm(&f);
        if f1 <= F_NORM_FLOOR {
            continue;
        }
        let ratio = g.abs() / f1;
        let replace = match &best {
            None => true,
            Some((best_ratio, ..)) => ratio < *best_ratio,
        };
        if replace {
            best = Some((ratio, g, f, (pos, neg)));
        }
    }
    let Some((ratio, g, f, selected)) = best else {
        return BoundaryPerturbation::zero(num_layers, z.cols());
    };
    let f1 = l1_norm(&f).max(F_NORM_FLOOR);
    let coeff = -g / f1;
    let delta: Vec<f64> = f.iter().map(|&fj| coeff * sign(fj)).collect();
    BoundaryPerturbation {
        per_layer: (0..num_layers).map(|_| delta.clone()).collect(),
        bound: ratio,
        margin: g,
        selected,
        degenerate: false,
    }
}

/// Constrained random draw for one node: per layer,
/// `r^(l) = ε·(r ⊙ sign(H^(l)))/‖r ⊙ sign(H^(l))‖₂` followed by the
/// elementwise projection `r̃ = clamp(r^(l), ±|Δ^(l)|)`.
#[derive(Debug, Clone)]
pub struct RandomDraw {
    /// `r̃^(l)` for layers `1..=L`.
    pub per_layer: Vec<Vec<f64>>,
}

impl RandomDraw {
    /// Aggregate-space offset `(1/(L+1))·Σ_l r̃^(l)`.
    pub fn offset(&self, num_layers: usize) -> Vec<f64> {
        sum_layers_scaled(&self.per_layer, num_layers)
    }
}

fn sum_layers_scaled(per_layer: &[Vec<f64>], num_layers: usize) -> Vec<f64> {
    let dim = per_layer.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for layer in per_layer {
        for (o, v) in out.iter_mut().zip(layer.iter()) {
            *o += *v;
        }
    }
    let scale = 1.0 / (num_layers as f64 + 1.0);
    for o in &mut out {
        *o *= scale;
    }
    out
}

/// Options mirroring the ablation switches that touch view generation.
#[derive(Debug, Clone, Copy, Default)]
pub struct ViewOptions {
    /// Replace the uniform draw with the all-ones vector.
    pub all_ones: bool,
    /// Skip the elementwise projection onto the boundary bound.
    pub unconstrained: bool,
}

/// One constrained random draw for `node`, using the stack rows for the
/// sign pattern and the node's boundary bound for the projection.
pub fn random_draw(
    stack: &LayerStack,
    node: usize,
    boundary: &BoundaryPerturbation,
    epsilon: f64,
    rng: &mut impl Rng,
    opts: ViewOptions,
) -> RandomDraw {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let num_layers = stack.depth();
    let dim = stack.dim();
    let mut per_layer = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let h = stack.layers[l].row(node);
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
            let bound = &boundary.per_layer[l - 1];
            for (rj, bj) in r.iter_mut().zip(bound.iter()) {
                let b = bj.abs();
                *rj = rj.clamp(-b, b);
            }
        }
        per_layer.push(r);
    }
    RandomDraw { per_layer }
}

/// Outcome of the adversarial-contrastive view construction for a node
/// list: the sign-modulated aggregate offsets, the per-layer `η`
/// vectors, and the raw gradient used by the sign rule (kept for
/// optimality audits).
#[derive(Debug)]
pub struct AdversarialContrastive {
    /// Aggregate-space offset of `z^ac` per node.
    pub offsets: Vec<Vec<f64>>,
    /// `η^(l)` per node, layers `1..=L`.
    pub eta: Vec<Vec<Vec<f64>>>,
    /// `∂L_CL/∂η^(l)` per node (identical across layers).
    pub grad: Mat,
}

/// Build the adversarial-contrastive views for `nodes`.
///
/// The linearization point is `η = 0`: the perturbed anchor equals the
/// aggregate plus the fresh constrained draw, the partner view is the
/// second random view, and a single signed step of size `δ` per
/// coordinate maximizes the linearized contrastive loss.
pub fn adversarial_contrastive(
    z: &Mat,
    nodes: &[usize],
    fresh_draws: &[RandomDraw],
    partner_offsets: &[Vec<f64>],
    bounds: &[f64],
    tau: f64,
    num_layers: usize,
) -> AdversarialContrastive {
    assert_eq!(nodes.len(), fresh_draws.len());
    assert_eq!(nodes.len(), partner_offsets.len());
    assert_eq!(nodes.len(), bounds.len());
    let dim = z.cols();
    let scale = 1.0 / (num_layers as f64 + 1.0);

    let mut tape = Tape::new();
    let anchor = {
        let mut m = z.gather_rows(nodes);
        for (r, draw) in fresh_draws.iter().enumerate() {
            let off = draw.offset(num_layers);
            if !off.is_empty() {
                crate::linalg::axpy(m.row_mut(r), 1.0, &off);
            }
        }
        tape.leaf(m)
    };
    let partner = {
        let mut m = z.gather_rows(nodes);
        for (r, off) in partner_offsets.iter().enumerate() {
            if !off.is_empty() {
                crate::linalg::axpy(m.row_mut(r), 1.0, off);
            }
        }
        tape.leaf(m)
    };
    let anchor_n = tape.normalize_rows(anchor);
    let partner_n = tape.normalize_rows(partner);
    let loss = tape.infonce(anchor_n, partner_n, tau);
    let mut grads = tape.backward(loss);
    let mut grad = grads.take(anchor).expect("anchor gradient missing");
    // d/dη^(l) = (1/(L+1)) · d/d(anchor row), identical for every layer
    grad.scale_in_place(scale);

    let mut eta = Vec::with_capacity(nodes.len());
    let mut offsets = Vec::with_capacity(nodes.len());
    for (r, draw) in fresh_draws.iter().enumerate() {
        let g = grad.row(r);
        let delta_bound = bounds[r];
        let eta_row: Vec<f64> = g.iter().map(|&gj| delta_bound * sign(gj)).collect();
        let mut offset = vec![0.0; dim];
        for layer in &draw.per_layer {
            for ((o, rj), ej) in offset.iter_mut().zip(layer.iter()).zip(eta_row.iter()) {
                *o += rj * sign(*ej);
            }
        }
        for o in &mut offset {
            *o *= scale;
        }
        eta.push(vec![eta_row; num_layers]);
        offsets.push(offset);
    }
    AdversarialContrastive { offsets, eta, grad }
}

/// Aggregate-space offset of the adversarial example `z^adv` for one
/// node: `(1/(L+1))·Σ_{l=1..L} Δ^(l)`.
pub fn adversarial_offset(boundary: &BoundaryPerturbation, num_layers: usize) -> Vec<f64> {
    sum_layers_scaled(&boundary.per_layer, num_layers)
}

/// Recompute a pair's margin after adding `delta` to a single layer-k
/// slot of the anchor (any k in `1..=L`; the coefficient is the same).
/// Used by the margin-zeroing checks.
pub fn margin_after_perturbation(
    z: &Mat,
    anchor: usize,
    pos: usize,
    neg: usize,
    delta: &[f64],
    num_layers: usize,
) -> f64 {
    let (g, f) = pairwise_margin(z, anchor, pos, neg, num_layers);
    g + dot(delta, &f)
}

/// `|g|/‖f‖₁` margins for diagnostics; `None` when degenerate.
pub fn margin_ratio(z: &Mat, anchor: usize, pos: usize, neg: usize, num_layers: usize) -> Option<f64> {
    let (g, f) = pairwise_margin(z, anchor, pos, neg, num_layers);
    let f1 = l1_norm(&f);
    if f1 <= F_NORM_FLOOR {
        None
    } else {
        Some(g.abs() / f1)
    }
}

/// Audit helper: true when `candidate` does not beat `eta` on the
/// linearized objective `<grad, ·>`.
pub fn fgsm_dominates(grad: &[f64], eta: &[f64], candidate: &[f64]) -> bool {
    dot(grad, eta) >= dot(grad, candidate) - 1e-12
}

/// Audit helper: elementwise `|r̃| ≤ |Δ|` check.
pub fn projection_sound(draw: &RandomDraw, boundary: &BoundaryPerturbation) -> bool {
    draw.per_layer
        .iter()
        .zip(boundary.per_layer.iter())
        .all(|(r, d)| {
            r.iter()
                .zip(d.iter())
                .all(|(rj, dj)| rj.abs() <= dj.abs() + 1e-15)
        })
}

/// Audit helper: `‖η^(l)‖_∞ ≤ δ` for every layer.
pub fn eta_within_bound(eta: &[Vec<f64>], bound: f64) -> bool {
    eta.iter().all(|layer| linf_norm(layer) <= bound + 1e-15)
}
