//! Set matching and the training objective.
//!
//! Predictions are matched to ground-truth points by a rectangular
//! Hungarian solver (shortest augmenting paths with potentials, O(n^3)).
//! The matched pairs feed an L1 point loss, a per-token binary
//! cross-entropy, and a contrastive alignment term; the density loss
//! joins through fixed weights. The assignment is computed from values
//! and held constant during backward.

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probabilities are clamped to this band before any logarithm.
pub const PROB_CLAMP: f64 = 1e-7;

/// One-to-one matching between queries and ground-truth points.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// (query index, gt index), sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    /// Queries left unmatched, ascending.
    pub unmatched: Vec<usize>,
    /// Total cost of the matched pairs.
    pub total: f64,
}

/// Loss weighting: classification, contrastive, density.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 5.0,
            lambda2: 0.06,
            alpha: 1.0,
        }
    }
}

/// All scalar terms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossReport {
    pub l_match: f64,
    pub l_cls: f64,
    pub l_contrast: f64,
    pub l_density: f64,
    pub l_loc: f64,
    pub l_total: f64,
    pub weights: LossWeights,
    /// Number of matched pairs behind the matched-only terms.
    pub matched: usize,
    /// True when the contrastive term was skipped (no negative available
    /// or nothing matched).
    pub contrast_skipped: bool,
}

impl LossReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_match", self.l_match),
            ("l_cls", self.l_cls),
            ("l_contrast", self.l_contrast),
            ("l_density", self.l_density),
        ] {
            if !v.is_finite() {
                return Err(Error::Invalid {
                    context: "losses::loss_report",
                    message: format!("{name} is not finite"),
                });
            }
        }
        let loc = self.l_match + self.weights.lambda1 * self.l_cls
            + self.weights.lambda2 * self.l_contrast;
        let total = loc + self.weights.alpha * self.l_density;
        if (loc - self.l_loc).abs() > 1e-9 || (total - self.l_total).abs() > 1e-9 {
            return Err(Error::invalid(
                "losses::loss_report",
                "aggregate does not equal the weighted sum of its parts",
            ));
        }
        Ok(())
    }
}

/// Minimum-total-cost one-to-one assignment of `min(K, G)` pairs via
/// shortest augmenting paths over row/column potentials.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    let shape = cost.shape();
    if shape.len() != 2 {
        return Err(Error::invalid("losses::hungarian_match", "cost must be [K, G]"));
    }
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "losses::hungarian_match",
        });
    }
    let (k, gcount) = (shape[0], shape[1]);
    if k == 0 || gcount == 0 {
        return Ok(Assignment {
            pairs: vec![],
            unmatched: (0..k).collect(),
            total: 0.0,
        });
    }
    // orient so rows <= cols; the solver assigns every row
    let transposed = k > gcount;
    let (n, m) = if transposed { (gcount, k) } else { (k, gcount) };
    let at = |r: usize, c: usize| -> f64 {
        if transposed {
            cost.at2(c, r)
        } else {
            cost.at2(r, c)
        }
    };
    // potentials u, v and column matching p, 1-based with 0 as sentinel
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // augment along the found path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    for j in 1..=m {
        if p[j] != 0 {
            let (row, col) = (p[j] - 1, j - 1);
            if transposed {
                pairs.push((col, row));
            } else {
                pairs.push((row, col));
            }
        }
    }
    pairs.sort_unstable();
    let total = pairs.iter().map(|(q, t)| cost.at2(*q, *t)).sum();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|(q, _)| *q).collect();
    let unmatched = (0..k).filter(|q| !matched.contains(q)).collect();
    Ok(Assignment {
        pairs,
        unmatched,
        total,
    })
}

/// `cost[k][j] = ‖p̂_k − p_j‖₁ + λ1 (1 − mean non-pad ŷ_k)`, built from
/// extracted values; the result drives matching only, not gradients.
pub fn matching_cost(
    points: &Tensor,
    probs: &Tensor,
    gt_points: &[(f64, f64)],
    n_real: usize,
    lambda1: f64,
) -> Result<Tensor> {
    let k = points.shape()[0];
    if points.shape().len() != 2 || points.shape()[1] != 2 {
        return Err(Error::invalid("losses::matching_cost", "points must be [K, 2]"));
    }
    if probs.shape()[0] != k || n_real == 0 || n_real > probs.shape()[1] {
        return Err(Error::invalid(
            "losses::matching_cost",
            "probability rows must align with points and non-pad count",
        ));
    }
    let g = gt_points.len();
    let mut cost = Tensor::zeros(vec![k.max(1), g.max(1)]);
    if g == 0 {
        return Ok(Tensor::zeros(vec![k, 0]));
    }
    for qi in 0..k {
        let mut mean_prob = 0.0;
        for ti in 0..n_real {
            mean_prob += probs.at2(qi, ti);
        }
        mean_prob /= n_real as f64;
        let cls_term = lambda1 * (1.0 - mean_prob);
        for (j, (gx, gy)) in gt_points.iter().enumerate() {
            let l1 = (points.at2(qi, 0) - gx).abs() + (points.at2(qi, 1) - gy).abs();
            cost.set2(qi, j, l1 + cls_term);
        }
    }
    Ok(cost)
}

/// Mean L1 distance over matched pairs, in-graph. Zero pairs yield a
/// constant zero node (flagged by the returned pair count).
pub fn match_loss(
    g: &mut Graph,
    assignment: &Assignment,
    points: NodeId,
    gt_points: &[(f64, f64)],
) -> Result<(NodeId, usize)> {
    let k_prime = assignment.pairs.len();
    if k_prime == 0 {
        return Ok((g.constant(Tensor::zeros(vec![1]))?, 0));
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|(q, _)| *q).collect();
    let matched = g.gather_rows(points, rows)?;
    let mut gt = Tensor::zeros(vec![k_prime, 2]);
    for (i, (_, j)) in assignment.pairs.iter().enumerate() {
        if *j >= gt_points.len() {
            return Err(Error::invalid("losses::match_loss", "gt index out of range"));
        }
        gt.set2(i, 0, gt_points[*j].0);
        gt.set2(i, 1, gt_points[*j].1);
    }
    let gt_node = g.constant(gt)?;
    let diff = g.sub(matched, gt_node)?;
    let l1 = g.abs(diff)?;
    let summed = g.sum(l1)?;
    Ok((g.scale(summed, 1.0 / k_prime as f64)?, k_prime))
}

/// Per-token binary cross-entropy, averaged over non-pad tokens then all
/// queries. Matched queries target 1 on every non-pad token (CLS
/// included); unmatched queries target 0.
pub fn cls_loss(
    g: &mut Graph,
    assignment: &Assignment,
    probs: NodeId,
    n_real: usize,
) -> Result<NodeId> {
    let shape = g.value(probs).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::invalid("losses::cls_loss", "probabilities must be [K, N]"));
    }
    let (k, n) = (shape[0], shape[1]);
    if n_real == 0 || n_real > n {
        return Err(Error::Invalid {
            context: "losses::cls_loss",
            message: format!("{n_real} non-pad tokens outside 1..={n}"),
        });
    }
    let mut target = Tensor::zeros(vec![k, n]);
    for (q, _) in &assignment.pairs {
        for i in 0..n_real {
            target.set2(*q, i, 1.0);
        }
    }
    let mut mask = Tensor::zeros(vec![1, n]);
    for i in 0..n_real {
        mask.data_mut()[i] = 1.0;
    }
    let y = g.constant(target)?;
    let mask = g.constant(mask)?;
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(p)?;
    let neg_p = g.scale(p, -1.0)?;
    let one_minus_p = g.add_scalar(neg_p, 1.0)?;
    let log_1p = g.log(one_minus_p)?;
    let neg_y = g.scale(y, -1.0)?;
    let one_minus_y = g.add_scalar(neg_y, 1.0)?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(one_minus_y, log_1p)?;
    let ll = g.add(pos, neg)?;
    let masked = g.mul(ll, mask)?;
    let summed = g.sum(masked)?;
    g.scale(summed, -1.0 / (k as f64 * n_real as f64))
}

/// Registers the contrastive projection under `{prefix}.proj`.
pub fn init_contrast(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize) -> Result<()> {
    nn::init_linear(store, rng, &format!("{prefix}.proj"), c, c, false)
}

/// `−mean_k [log s^p_k + log(1 − s^n_k)]` over matched queries, where
/// `s = sigmoid(dot(proj(content), e)/sqrt(C))`. Returns the zero node
/// flagged as skipped when nothing matched or no negative exists.
pub fn contrastive_loss(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    assignment: &Assignment,
    contents: NodeId,
    e_pos: &[f64],
    e_neg: Option<&[f64]>,
) -> Result<(NodeId, bool)> {
    let c = g.value(contents).shape()[1];
    if e_pos.len() != c || e_neg.is_some_and(|e| e.len() != c) {
        return Err(Error::invalid(
            "losses::contrastive_loss",
            "embedding width does not match contents",
        ));
    }
    let k_prime = assignment.pairs.len();
    let Some(e_neg) = e_neg else {
        return Ok((g.constant(Tensor::zeros(vec![1]))?, true));
    };
    if k_prime == 0 {
        return Ok((g.constant(Tensor::zeros(vec![1]))?, true));
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|(q, _)| *q).collect();
    let matched = g.gather_rows(contents, rows)?;
    let proj = nn::linear(g, store, &format!("{prefix}.proj"), matched)?;
    let score = |g: &mut Graph, e: &[f64]| -> Result<NodeId> {
        let col = g.constant(Tensor::new(vec![c, 1], e.to_vec())?)?;
        let dots = g.matmul(proj, col)?;
        let scaled = g.scale(dots, 1.0 / (c as f64).sqrt())?;
        let s = g.sigmoid(scaled)?;
        g.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    };
    let s_pos = score(g, e_pos)?;
    let s_neg = score(g, e_neg)?;
    let log_pos = g.log(s_pos)?;
    let neg_sn = g.scale(s_neg, -1.0)?;
    let one_minus_sn = g.add_scalar(neg_sn, 1.0)?;
    let log_neg = g.log(one_minus_sn)?;
    let both = g.add(log_pos, log_neg)?;
    let summed = g.sum(both)?;
    Ok((g.scale(summed, -1.0 / k_prime as f64)?, false))
}

/// `L_loc = L_match + λ1 L_cls + λ2 L_contrast`,
/// `L_total = L_loc + α L_density`, in-graph.
pub fn total_loss_nodes(
    g: &mut Graph,
    l_match: NodeId,
    l_cls: NodeId,
    l_contrast: NodeId,
    l_density: NodeId,
    weights: &LossWeights,
) -> Result<(NodeId, NodeId)> {
    let wc = g.scale(l_cls, weights.lambda1)?;
    let wk = g.scale(l_contrast, weights.lambda2)?;
    let partial = g.add(l_match, wc)?;
    let l_loc = g.add(partial, wk)?;
    let wd = g.scale(l_density, weights.alpha)?;
    let l_total = g.add(l_loc, wd)?;
    Ok((l_loc, l_total))
}

/// Assembles and validates the scalar report for one step.
#[allow(clippy::too_many_arguments)]
pub fn loss_report(
    l_match: f64,
    l_cls: f64,
    l_contrast: f64,
    l_density: f64,
    weights: &LossWeights,
    matched: usize,
    contrast_skipped: bool,
) -> Result<LossReport> {
    let l_loc = l_match + weights.lambda1 * l_cls + weights.lambda2 * l_contrast;
    let l_total = l_loc + weights.alpha * l_density;
    let report = LossReport {
        l_match,
        l_cls,
        l_contrast,
        l_density,
        l_loc,
        l_total,
        weights: *weights,
        matched,
        contrast_skipped,
    };
    report.validate()?;
    Ok(report)
}
