//! Feasible targets, set matching and the training loss.
//!
//! Every loss function returns its value together with the gradient with
//! respect to its raw inputs, so the result can seed a backward pass.

use serde::{Deserialize, Serialize};

use crate::click::Click;
use crate::error::{Error, Result};
use crate::mask::{iou, MaskGrid};
use crate::model::Proposals;
use crate::scalar::{sigmoid, softplus, Scalar};

/// Smoothing term of the Dice loss denominator.
pub const DICE_EPS: f64 = 1.0;

/// Ground-truth masks consistent with every click.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeasibleTargets {
    pub masks: Vec<MaskGrid>,
    /// Position of each retained mask in the original annotation list.
    pub source_indices: Vec<usize>,
}

impl FeasibleTargets {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Position among the retained masks of annotation `source`.
    pub fn position_of(&self, source: usize) -> Option<usize> {
        self.source_indices.iter().position(|&s| s == source)
    }
}

fn consistent(mask: &MaskGrid, clicks: &[Click]) -> bool {
    clicks.iter().all(|c| {
        c.in_bounds(mask.width(), mask.height()) && mask.get(c.x, c.y) == c.polarity.is_positive()
    })
}

/// Keeps the masks that contain every positive click and no negative one.
pub fn feasible_targets(all_masks: &[MaskGrid], clicks: &[Click]) -> Result<FeasibleTargets> {
    if all_masks.is_empty() || clicks.is_empty() {
        return Err(Error::InvalidInput(
            "feasible targets need at least one mask and one click".into(),
        ));
    }
    let (masks, source_indices): (Vec<_>, Vec<_>) = all_masks
        .iter()
        .enumerate()
        .filter(|(_, m)| consistent(m, clicks))
        .map(|(i, m)| (m.clone(), i))
        .unzip();
    if masks.is_empty() {
        return Err(Error::EmptyFeasibleSet);
    }
    Ok(FeasibleTargets {
        masks,
        source_indices,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(proposal, target)` pairs sorted by proposal.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_proposals: Vec<usize>,
}

impl Assignment {
    pub fn target_of(&self, proposal: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(p, _)| *p == proposal)
            .map(|(_, t)| *t)
    }

    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, t)| cost[p][t]).sum()
    }
}

/// Minimum-cost injective assignment between the rows (proposals) and
/// columns (targets) of `cost`; `min(N, K)` pairs are produced.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    let k = cost.first().map_or(0, |r| r.len());
    if cost.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("cost matrix rows differ in length".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("cost matrix has a non-finite entry".into()));
    }
    if n == 0 || k == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_proposals: (0..n).collect(),
        });
    }
    // The solver assigns every row of a rows ≤ cols matrix.
    let transposed = n > k;
    let (rows, cols) = if transposed { (k, n) } else { (n, k) };
    let at = |r: usize, c: usize| if transposed { cost[c][r] } else { cost[r][c] };
    let row_of_col = solve(rows, cols, at);
    let mut pairs: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(c, r)| r.map(|r| if transposed { (c, r) } else { (r, c) }))
        .collect();
    pairs.sort_unstable();
    let unmatched_proposals = (0..n)
        .filter(|p| pairs.iter().all(|(q, _)| q != p))
        .collect();
    Ok(Assignment {
        pairs,
        unmatched_proposals,
    })
}

/// Shortest augmenting path with potentials; returns the row assigned to
/// each column.
fn solve(rows: usize, cols: usize, a: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // p[j]: 1-based row matched to column j; column 0 is the virtual start.
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=cols)
        .map(|j| if p[j] == 0 { None } else { Some(p[j] - 1) })
        .collect()
}

/// `1 − 2Σpt / (Σp + Σt + ε)` on probabilities.
pub fn dice_loss<T: Scalar>(probs: &[T], target: &MaskGrid) -> T {
    let (inter, denom) = dice_sums(probs, target);
    T::one() - T::lit(2.0) * inter / denom
}

fn dice_sums<T: Scalar>(probs: &[T], target: &MaskGrid) -> (T, T) {
    assert_eq!(probs.len(), target.bits().len(), "dice operand sizes");
    let mut inter = T::zero();
    let mut sp = T::zero();
    for (p, t) in probs.iter().zip(target.bits()) {
        sp += *p;
        if *t {
            inter += *p;
        }
    }
    (inter, sp + T::lit(target.count() as f64 + DICE_EPS))
}

/// Dice loss of `sigmoid(logits)` and its gradient w.r.t. the logits.
pub fn dice_loss_logits<T: Scalar>(logits: &[T], target: &MaskGrid) -> (T, Vec<T>) {
    let probs: Vec<T> = logits.iter().map(|x| sigmoid(*x)).collect();
    let (inter, denom) = dice_sums(&probs, target);
    let two = T::lit(2.0);
    let value = T::one() - two * inter / denom;
    let common = two * inter / (denom * denom);
    let grad = probs
        .iter()
        .zip(target.bits())
        .map(|(p, t)| {
            let dp = if *t { common - two / denom } else { common };
            dp * *p * (T::one() - *p)
        })
        .collect();
    (value, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    /// Weight of the positive class; `None` weighs both classes by one.
    pub alpha: Option<f64>,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

/// Mean binary focal loss over pixels and its gradient w.r.t. the logits.
pub fn focal_loss_logits<T: Scalar>(logits: &[T], target: &MaskGrid, params: FocalParams) -> (T, Vec<T>) {
    assert_eq!(logits.len(), target.bits().len(), "focal operand sizes");
    let g = T::lit(params.gamma);
    let (wp, wn) = match params.alpha {
        Some(a) => (T::lit(a), T::lit(1.0 - a)),
        None => (T::one(), T::one()),
    };
    let inv_n = T::one() / T::from_usize(logits.len().max(1)).unwrap();
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (x, t) in logits.iter().zip(target.bits()) {
        let p = sigmoid(*x);
        let q = sigmoid(-*x);
        let log_p = -softplus(-*x);
        let log_q = -softplus(*x);
        let (v, d) = if *t {
            let m = q.powf(g);
            (-wp * m * log_p, wp * m * (g * p * log_p - q))
        } else {
            let m = p.powf(g);
            (-wn * m * log_q, wn * m * (p - g * q * log_q))
        };
        total += v;
        grad.push(d * inv_n);
    }
    (total * inv_n, grad)
}

pub fn focal_loss<T: Scalar>(logits: &[T], target: &MaskGrid, params: FocalParams) -> T {
    focal_loss_logits(logits, target, params).0
}

/// Matching cost of one proposal against one target: Dice + focal.
pub fn match_cost<T: Scalar>(logits: &[T], target: &MaskGrid, focal: FocalParams) -> T {
    let probs: Vec<T> = logits.iter().map(|x| sigmoid(*x)).collect();
    dice_loss(&probs, target) + focal_loss(logits, target, focal)
}

/// `[N][K]` matching costs between proposals and feasible targets.
pub fn cost_matrix<T: Scalar>(proposals: &Proposals<T>, targets: &[MaskGrid], focal: FocalParams) -> Vec<Vec<f64>> {
    (0..proposals.len())
        .map(|i| {
            targets
                .iter()
                .map(|t| match_cost(proposals.logits(i), t, focal).to_f64().unwrap_or(f64::NAN))
                .collect()
        })
        .collect()
}

/// IoU of every binarised proposal with the primary target.
pub fn pseudo_iou_labels<T: Scalar>(proposals: &Proposals<T>, primary: &MaskGrid) -> Vec<f64> {
    (0..proposals.len())
        .map(|i| iou(&proposals.mask(i), primary))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub dice: f64,
    pub focal: f64,
    pub iou: f64,
    pub conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 1.0,
            focal: 1.0,
            iou: 1.0,
            conf: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub iou_l1: f64,
    pub conf_bce: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Gradients of the total loss w.r.t. the proposal outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    /// `N*H*W`, laid out like `Proposals::mask_logits`.
    pub logits: Vec<T>,
    /// W.r.t. the squashed confidences.
    pub conf: Vec<T>,
    /// W.r.t. the squashed IoU predictions.
    pub iou: Vec<T>,
}

/// Binary cross-entropy of a probability with its gradient; the probability
/// is clamped away from 0 and 1 by the type's epsilon.
fn bce<T: Scalar>(s: T, y: T) -> (T, T) {
    let eps = T::epsilon();
    let s = s.max(eps).min(T::one() - eps);
    let v = -(y * s.ln() + (T::one() - y) * (T::one() - s).ln());
    (v, (s - y) / (s * (T::one() - s)))
}

/// Matched-pair mask terms plus score terms over all proposals.
pub fn total_loss<T: Scalar>(
    proposals: &Proposals<T>,
    feasible: &FeasibleTargets,
    assignment: &Assignment,
    pseudo_iou: &[f64],
    weights: LossWeights,
    focal: FocalParams,
) -> (LossBreakdown, LossGrad<T>) {
    let n = proposals.len();
    let hw = proposals.height() * proposals.width();
    assert_eq!(pseudo_iou.len(), n, "one pseudo label per proposal");
    let mut d_logits = vec![T::zero(); n * hw];

    let pairs = assignment.pairs.len();
    let (mut dice, mut foc) = (T::zero(), T::zero());
    if pairs > 0 {
        let inv = T::one() / T::from_usize(pairs).unwrap();
        for &(i, k) in &assignment.pairs {
            let target = &feasible.masks[k];
            let (dv, dg) = dice_loss_logits(proposals.logits(i), target);
            let (fv, fg) = focal_loss_logits(proposals.logits(i), target, focal);
            dice += dv * inv;
            foc += fv * inv;
            let wd = T::lit(weights.dice) * inv;
            let wf = T::lit(weights.focal) * inv;
            for (o, (a, b)) in d_logits[i * hw..(i + 1) * hw].iter_mut().zip(dg.iter().zip(&fg)) {
                *o = wd * *a + wf * *b;
            }
        }
    }

    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut l1 = T::zero();
    let mut d_iou = Vec::with_capacity(n);
    for (s, y) in proposals.iou_pred.iter().zip(pseudo_iou) {
        let diff = *s - T::lit(*y);
        l1 += diff.abs() * inv_n;
        let sign = if diff > T::zero() {
            T::one()
        } else if diff < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        d_iou.push(T::lit(weights.iou) * sign * inv_n);
    }

    let mut conf_loss = T::zero();
    let mut d_conf = Vec::with_capacity(n);
    for (i, s) in proposals.conf.iter().enumerate() {
        let y = if assignment.target_of(i).is_some() {
            T::one()
        } else {
            T::zero()
        };
        let (v, g) = bce(*s, y);
        conf_loss += v * inv_n;
        d_conf.push(T::lit(weights.conf) * g * inv_n);
    }

    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let (dice, foc, l1, conf_loss) = (f(dice), f(foc), f(l1), f(conf_loss));
    let total =
        weights.dice * dice + weights.focal * foc + weights.iou * l1 + weights.conf * conf_loss;
    (
        LossBreakdown {
            dice,
            focal: foc,
            iou_l1: l1,
            conf_bce: conf_loss,
            total,
            weights,
        },
        LossGrad {
            logits: d_logits,
            conf: d_conf,
            iou: d_iou,
        },
    )
}

/// Everything the training step needs from one set of proposals.
#[derive(Debug, Clone)]
pub struct MatchedLoss<T> {
    pub assignment: Assignment,
    pub pseudo_iou: Vec<f64>,
    pub breakdown: LossBreakdown,
    pub grad: LossGrad<T>,
}

/// Costs, assignment, pseudo labels and loss in one go.
pub fn match_and_loss<T: Scalar>(
    proposals: &Proposals<T>,
    feasible: &FeasibleTargets,
    primary: &MaskGrid,
    weights: LossWeights,
    focal: FocalParams,
) -> Result<MatchedLoss<T>> {
    let cost = cost_matrix(proposals, &feasible.masks, focal);
    let assignment = hungarian_match(&cost)?;
    let pseudo_iou = pseudo_iou_labels(proposals, primary);
    let (breakdown, grad) = total_loss(proposals, feasible, &assignment, &pseudo_iou, weights, focal);
    Ok(MatchedLoss {
        assignment,
        pseudo_iou,
        breakdown,
        grad,
    })
}
