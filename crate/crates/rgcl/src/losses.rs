//! The five objective terms and their composition: ranking loss on clean
//! scores, the same loss on adversarial scores, six contrastive terms
//! over the view triplets, and the weighted joint objective.
//!
//! Every term exists in two forms that share the same formulas: a plain
//! scalar evaluation and a tape builder used by the training step to
//! obtain gradients. Contrastive losses are sums over the deduplicated
//! in-batch node set; ranking losses are sums over batch triples.

use crate::diff::{softplus, Tape, ValueId};
use crate::linalg::{dot, l2_norm, Mat};

/// All loss components of one step, with the weights echoed.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub adv: f64,
    pub cl: f64,
    /// user (z', z''), (z_ac, z'), (z_ac, z''), then the item side.
    pub cl_terms: [f64; 6],
    pub total: f64,
    pub mu: f64,
    pub alpha: f64,
    pub tau: f64,
}

impl LossBreakdown {
    pub fn compose(bpr: f64, adv: f64, cl: f64, cl_terms: [f64; 6], mu: f64, alpha: f64, tau: f64) -> Self {
        LossBreakdown {
            bpr,
            adv,
            cl,
            cl_terms,
            total: bpr + mu * adv + alpha * cl,
            mu,
            alpha,
            tau,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bpr.is_finite()
            && self.adv.is_finite()
            && self.cl.is_finite()
            && self.total.is_finite()
    }
}

/// Ranking loss `-sum ln sigma(r+ - r-)` over triples of rows in `z`.
/// Items are addressed in node space (already offset by the user count).
pub fn bpr_loss(z: &Mat, triples: &[(usize, usize, usize)]) -> f64 {
    triples
        .iter()
        .map(|&(u, p, n)| {
            let diff = dot(z.row(u), z.row(p)) - dot(z.row(u), z.row(n));
            softplus(-diff)
        })
        .sum()
}

/// Tape form of [`bpr_loss`]; `offsets` (if any) shift the gathered rows
/// by per-row constants, which is how adversarial scores are built.
pub fn bpr_loss_op(
    tape: &mut Tape,
    z: ValueId,
    triples: &[(usize, usize, usize)],
    offsets: Option<(&Mat, &Mat, &Mat)>,
) -> ValueId {
    let users: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let pos: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let neg: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let mut zu = tape.gather(z, users);
    let mut zp = tape.gather(z, pos);
    let mut zn = tape.gather(z, neg);
    if let Some((ou, op, on)) = offsets {
        zu = tape.offset_rows(zu, ou);
        zp = tape.offset_rows(zp, op);
        zn = tape.offset_rows(zn, on);
    }
    let pos_scores = tape.row_dot(zu, zp);
    let neg_scores = tape.row_dot(zu, zn);
    let diff = tape.sub(pos_scores, neg_scores);
    tape.neg_sum_log_sigmoid(diff)
}

/// Plain evaluation of the in-batch contrastive loss between two view
/// matrices (cosine similarity, denominator over all rows of `y`).
pub fn infonce(x: &Mat, y: &Mat, tau: f64) -> f64 {
    assert!(tau > 0.0, "temperature must be positive");
    assert_eq!(x.rows(), y.rows());
    assert!(x.rows() > 0, "contrastive batch is empty");
    let n = x.rows();
    let inv_tau = 1.0 / tau;
    let norm_row = |m: &Mat, r: usize| {
        let nrm = l2_norm(m.row(r)).max(crate::diff::NORM_FLOOR);
        (nrm, r)
    };
    let mut total = 0.0;
    for u in 0..n {
        let (nx, _) = norm_row(x, u);
        let mut sims = Vec::with_capacity(n);
        for v in 0..n {
            let (ny, _) = norm_row(y, v);
            sims.push(dot(x.row(u), y.row(v)) / (nx * ny) * inv_tau);
        }
        let m = sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + sims.iter().map(|&s| (s - m).exp()).sum::<f64>().ln();
        total += lse - sims[u];
    }
    total
}

/// Tape form of [`infonce`] over views already placed on the tape.
pub fn infonce_op(tape: &mut Tape, x: ValueId, y: ValueId, tau: f64) -> ValueId {
    let xn = tape.normalize_rows(x);
    let yn = tape.normalize_rows(y);
    tape.infonce(xn, yn, tau)
}

/// The six-term multi-view contrastive loss. View matrices are row-wise
/// aligned per side: users `(z', z'', z_ac)` and items `(z', z'', z_ac)`.
/// With `skip_ac` the four terms anchored on `z_ac` are dropped.
#[allow(clippy::too_many_arguments)]
pub fn multiview_cl_loss(
    user_views: (&Mat, &Mat, &Mat),
    item_views: (&Mat, &Mat, &Mat),
    tau: f64,
    skip_ac: bool,
) -> (f64, [f64; 6]) {
    let (u1, u2, uac) = user_views;
    let (i1, i2, iac) = item_views;
    let mut terms = [0.0; 6];
    terms[0] = infonce(u1, u2, tau);
    terms[3] = infonce(i1, i2, tau);
    if !skip_ac {
        terms[1] = infonce(uac, u1, tau);
        terms[2] = infonce(uac, u2, tau);
        terms[4] = infonce(iac, i1, tau);
        terms[5] = infonce(iac, i2, tau);
    }
    (terms.iter().sum(), terms)
}

/// Joint objective `L = L_BPR + mu * L_ADV + alpha * L_CL`.
pub fn joint_loss(
    bpr: f64,
    adv: f64,
    cl: f64,
    cl_terms: [f64; 6],
    mu: f64,
    alpha: f64,
    tau: f64,
) -> LossBreakdown {
    assert!(mu >= 0.0 && alpha >= 0.0, "loss weights must be nonnegative");
    LossBreakdown::compose(bpr, adv, cl, cl_terms, mu, alpha, tau)
}
