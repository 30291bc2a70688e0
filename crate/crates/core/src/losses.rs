//! Contrastive objectives over fused embeddings.
//!
//! * [`ntxent_loss`]: softmax cross-entropy over similarity logits `sim/τ`.
//! * [`mracl_loss`]: the same structure on the angular similarity
//!   `θ = π/2 − arccos(cos)`, with a margin subtracted from the positive
//!   logit: `−log(e^{(θ⁺−m)/τ} / (e^{(θ⁺−m)/τ} + Σ_j e^{θ_j/τ}))`.
//! * [`l2_contrastive_loss`]: squared-distance pull plus hinge push.
//!
//! Negatives can be switched off per anchor through the batch mask; the
//! positive always participates. All losses are averaged over anchors and
//! return gradients with respect to every embedding in the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{self, axpy};
use crate::similarity::{cosine_sim, similarity_grad, SimilarityKind};

/// Tolerance on the unit-norm invariant of batch embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-10;

/// One minibatch of anchors, positives and per-anchor negatives.
///
/// `mask[i][k]` is `true` when `negatives[i][k]` participates in the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
    pub mask: Vec<Vec<bool>>,
}

impl ContrastiveBatch {
    /// Builds a batch with every negative enabled and checks all invariants.
    pub fn new(anchors: Vec<Vec<f64>>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let mask = negatives.iter().map(|row| vec![true; row.len()]).collect();
        let batch = ContrastiveBatch {
            anchors,
            positives,
            negatives,
            mask,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn with_mask(mut self, mask: Vec<Vec<bool>>) -> Result<Self> {
        self.mask = mask;
        self.check_shapes()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().flatten().filter(|&&keep| !keep).count()
    }

    /// Shape checks plus the unit-norm invariant.
    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in all {
            let n = numcore::norm(v);
            if !n.is_finite() {
                return Err(Error::non_finite("batch embedding"));
            }
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidData(format!("batch embedding has norm {n}, expected 1")));
            }
        }
        Ok(())
    }

    /// Shape checks only; used by the loss kernels, which are scale
    /// invariant and may be probed off the sphere by gradient checks.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.anchors.len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.positives.len() != n || self.negatives.len() != n || self.mask.len() != n {
            return Err(Error::ShapeMismatch {
                context: "contrastive batch",
                expected: format!("{n} positives, negative rows and mask rows"),
                got: format!(
                    "{} positives, {} negative rows, {} mask rows",
                    self.positives.len(),
                    self.negatives.len(),
                    self.mask.len()
                ),
            });
        }
        let dim = self.anchors[0].len();
        for (row, mask) in self.negatives.iter().zip(&self.mask) {
            if row.len() != mask.len() {
                return Err(Error::ShapeMismatch {
                    context: "negative mask",
                    expected: format!("{} entries", row.len()),
                    got: format!("{} entries", mask.len()),
                });
            }
        }
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        for v in all {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Flattens every embedding (anchors, positives, negatives row-major).
    pub fn flatten(&self) -> Vec<f64> {
        self.anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten())
            .flatten()
            .copied()
            .collect()
    }

    /// Inverse of [`flatten`](Self::flatten), reusing this batch's layout and mask.
    pub fn unflatten(&self, flat: &[f64]) -> ContrastiveBatch {
        let dim = self.anchors[0].len();
        let mut chunks = flat.chunks(dim).map(|c| c.to_vec());
        let anchors = (0..self.len()).map(|_| chunks.next().unwrap()).collect();
        let positives = (0..self.len()).map(|_| chunks.next().unwrap()).collect();
        let negatives = self
            .negatives
            .iter()
            .map(|row| row.iter().map(|_| chunks.next().unwrap()).collect())
            .collect();
        ContrastiveBatch {
            anchors,
            positives,
            negatives,
            mask: self.mask.clone(),
        }
    }
}

/// Gradients with the same layout as a [`ContrastiveBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrads {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<f64>>>,
}

impl BatchGrads {
    fn zeros_like(batch: &ContrastiveBatch) -> Self {
        let dim = batch.anchors[0].len();
        BatchGrads {
            anchors: vec![vec![0.0; dim]; batch.len()],
            positives: vec![vec![0.0; dim]; batch.len()],
            negatives: batch.negatives.iter().map(|row| vec![vec![0.0; dim]; row.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten())
            .flatten()
            .copied()
            .collect()
    }

    fn scale(&mut self, factor: f64) {
        let all = self
            .anchors
            .iter_mut()
            .chain(self.positives.iter_mut())
            .chain(self.negatives.iter_mut().flatten());
        for v in all {
            numcore::scale_in_place(factor, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: BatchGrads,
    /// Pairs whose angular gradient was zeroed by the arccos clamp.
    pub clamp_events: usize,
    pub masked_negatives: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginUnit {
    #[default]
    Degrees,
    Radians,
}

/// Which terms make up the softmax denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Denominator {
    /// Positive plus negatives; the anchor's self-similarity is excluded.
    #[default]
    Standard,
    /// Anchor self-similarity plus negatives, with the positive appearing
    /// only in the numerator.
    Literal,
}

/// Contrastive hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossHyper {
    pub tau: f64,
    /// Margin in `margin_unit`; see [`LossHyper::margin_radians`].
    pub margin_m: f64,
    pub margin_unit: MarginUnit,
    pub alpha: f64,
    /// False-negative threshold on the cosine scale.
    pub nu: f64,
    pub similarity: SimilarityKind,
    pub denominator: Denominator,
}

impl Default for LossHyper {
    fn default() -> Self {
        LossHyper {
            tau: 0.07,
            margin_m: 12.0,
            margin_unit: MarginUnit::Degrees,
            alpha: 0.1,
            nu: 0.5,
            similarity: SimilarityKind::Angular,
            denominator: Denominator::Standard,
        }
    }
}

impl LossHyper {
    pub fn margin_radians(&self) -> f64 {
        match self.margin_unit {
            MarginUnit::Degrees => self.margin_m.to_radians(),
            MarginUnit::Radians => self.margin_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau", "temperature must be > 0"));
        }
        if !(self.margin_m >= 0.0) || !self.margin_m.is_finite() {
            return Err(Error::config("margin_m", "margin must be >= 0"));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config("alpha", "alpha must be >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.nu) {
            return Err(Error::config("nu", "nu must lie in [-1, 1]"));
        }
        Ok(())
    }
}

/// Stable `log Σ exp` with softmax weights.
fn log_sum_exp(logits: &[f64]) -> (f64, f64, Vec<f64>) {
    let (arg, max) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, l)| if l > acc.1 { (k, l) } else { acc });
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let rest: f64 = exps.iter().enumerate().filter(|&(k, _)| k != arg).map(|(_, e)| e).sum();
    let sum = 1.0 + rest;
    (max, rest.ln_1p(), exps.into_iter().map(|e| e / sum).collect())
}

/// Shared kernel for the softmax-style contrastive losses.
fn softmax_contrastive(
    batch: &ContrastiveBatch,
    tau: f64,
    margin: f64,
    kind: SimilarityKind,
    denominator: Denominator,
) -> Result<LossOutput> {
    batch.check_shapes()?;
    if !(tau > 0.0) {
        return Err(Error::config("tau", "temperature must be > 0"));
    }
    let n = batch.len();
    let mut grads = BatchGrads::zeros_like(batch);
    let mut total = 0.0;
    let mut clamp_events = 0;

    for i in 0..n {
        let anchor = &batch.anchors[i];
        let pos = similarity_grad(kind, anchor, &batch.positives[i])?;
        clamp_events += pos.clamped as usize;

        let mut negs = Vec::new();
        for (k, neg) in batch.negatives[i].iter().enumerate() {
            if batch.mask[i][k] {
                let g = similarity_grad(kind, anchor, neg)?;
                clamp_events += g.clamped as usize;
                negs.push((k, g));
            }
        }

        let pos_logit = (pos.value - margin) / tau;
        // Slot 0 of the denominator is either the positive or the anchor's
        // (constant) self-similarity.
        let first = match denominator {
            Denominator::Standard => pos_logit,
            Denominator::Literal => crate::similarity::similarity(kind, anchor, anchor)? / tau,
        };
        let mut logits = Vec::with_capacity(negs.len() + 1);
        logits.push(first);
        logits.extend(negs.iter().map(|(_, g)| g.value / tau));
        // max + ln(1 + rest) − s⁺/τ, kept apart so tiny losses stay accurate
        let (max, log1p_rest, weights) = log_sum_exp(&logits);
        let loss_i = (max - pos_logit) + log1p_rest;
        if !loss_i.is_finite() {
            return Err(Error::non_finite(format!("contrastive loss for anchor {i}")));
        }
        total += loss_i;

        let pos_coeff = match denominator {
            Denominator::Standard => weights[0] - 1.0,
            Denominator::Literal => -1.0,
        } / tau;
        axpy(pos_coeff, &pos.du, &mut grads.anchors[i]);
        axpy(pos_coeff, &pos.dv, &mut grads.positives[i]);
        for ((k, g), w) in negs.iter().zip(&weights[1..]) {
            let c = w / tau;
            axpy(c, &g.du, &mut grads.anchors[i]);
            axpy(c, &g.dv, &mut grads.negatives[i][*k]);
        }
    }

    grads.scale(1.0 / n as f64);
    Ok(LossOutput {
        value: total / n as f64,
        grads,
        clamp_events,
        masked_negatives: batch.masked_count(),
    })
}

/// NT-Xent with the standard denominator (positive + negatives).
pub fn ntxent_loss(batch: &ContrastiveBatch, tau: f64, kind: SimilarityKind) -> Result<LossOutput> {
    softmax_contrastive(batch, tau, 0.0, kind, Denominator::Standard)
}

/// NT-Xent with an explicit denominator convention.
pub fn ntxent_loss_with(
    batch: &ContrastiveBatch,
    tau: f64,
    kind: SimilarityKind,
    denominator: Denominator,
) -> Result<LossOutput> {
    softmax_contrastive(batch, tau, 0.0, kind, denominator)
}

/// Radial contrastive loss: angular logits with the margin taken off the
/// positive. `hyper.similarity` is normally `Angular`; switching it to
/// `Cosine` with a zero margin reproduces [`ntxent_loss`].
pub fn mracl_loss(batch: &ContrastiveBatch, hyper: &LossHyper) -> Result<LossOutput> {
    hyper.validate()?;
    softmax_contrastive(batch, hyper.tau, hyper.margin_radians(), hyper.similarity, hyper.denominator)
}

/// `mean_i ‖z_i − z̃_i‖² + Σ_j max(0, margin − ‖z_i − n_ij‖)²`.
pub fn l2_contrastive_loss(batch: &ContrastiveBatch, margin: f64) -> Result<LossOutput> {
    batch.check_shapes()?;
    let n = batch.len();
    let mut grads = BatchGrads::zeros_like(batch);
    let mut total = 0.0;
    for i in 0..n {
        let a = &batch.anchors[i];
        let diff: Vec<f64> = a.iter().zip(&batch.positives[i]).map(|(x, y)| x - y).collect();
        total += numcore::dot(&diff, &diff);
        axpy(2.0, &diff, &mut grads.anchors[i]);
        axpy(-2.0, &diff, &mut grads.positives[i]);
        for (k, neg) in batch.negatives[i].iter().enumerate() {
            if !batch.mask[i][k] {
                continue;
            }
            let d: Vec<f64> = a.iter().zip(neg).map(|(x, y)| x - y).collect();
            let dist = numcore::norm(&d);
            let gap = margin - dist;
            if gap <= 0.0 {
                continue;
            }
            total += gap * gap;
            if dist > 0.0 {
                let c = -2.0 * gap / dist;
                axpy(c, &d, &mut grads.anchors[i]);
                axpy(-c, &d, &mut grads.negatives[i][k]);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::non_finite("l2 contrastive loss"));
    }
    grads.scale(1.0 / n as f64);
    Ok(LossOutput {
        value: total / n as f64,
        grads,
        clamp_events: 0,
        masked_negatives: batch.masked_count(),
    })
}

/// `keep[i][j]` is `false` when `i ≠ j` and `cos(z_i, z_j) > ν`.
pub fn false_negative_mask<V: AsRef<[f64]>>(anchors: &[V], nu: f64) -> Result<Vec<Vec<bool>>> {
    let n = anchors.len();
    let mut keep = vec![vec![true; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = cosine_sim(anchors[i].as_ref(), anchors[j].as_ref())?;
            if s > nu {
                keep[i][j] = false;
                keep[j][i] = false;
            }
        }
    }
    Ok(keep)
}

/// Per-step summary of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub seg_term: f64,
    pub contrastive_term: f64,
    pub alpha: f64,
    pub masked_negative_count: usize,
    pub clamp_event_count: usize,
    pub grad_norm: f64,
}

/// A loss value together with its gradient over some flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `L = L_seg + α · L_contrastive`, with gradients combined the same way.
pub fn combined_loss(seg: &Term, contrastive: &Term, alpha: f64) -> Result<(LossReport, Vec<f64>)> {
    if !seg.value.is_finite() || !contrastive.value.is_finite() || !alpha.is_finite() {
        return Err(Error::non_finite("combined loss terms"));
    }
    if seg.grad.len() != contrastive.grad.len() {
        return Err(Error::DimensionMismatch {
            expected: seg.grad.len(),
            got: contrastive.grad.len(),
        });
    }
    let mut grad = seg.grad.clone();
    if alpha != 0.0 {
        axpy(alpha, &contrastive.grad, &mut grad);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::non_finite("combined gradient"));
    }
    let report = LossReport {
        total: seg.value + alpha * contrastive.value,
        seg_term: seg.value,
        contrastive_term: contrastive.value,
        alpha,
        masked_negative_count: 0,
        clamp_event_count: 0,
        grad_norm: numcore::norm(&grad),
    };
    Ok((report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn single(anchor: Vec<f64>, pos: Vec<f64>, negs: Vec<Vec<f64>>) -> ContrastiveBatch {
        ContrastiveBatch::new(vec![anchor], vec![pos], vec![negs]).unwrap()
    }

    #[test]
    fn single_term_softmax_is_zero() {
        let b = single(vec![1.0, 0.0], vec![0.6, 0.8], vec![]);
        assert_eq!(ntxent_loss(&b, 0.07, SimilarityKind::Cosine).unwrap().value, 0.0);
    }

    #[test]
    fn ntxent_scalar_oracle() {
        // log(1 + e^{-1/0.07}), 40-digit mpmath
        let b = single(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![0.0, 1.0]]);
        let out = ntxent_loss(&b, 0.07, SimilarityKind::Cosine).unwrap();
        assert!((out.value / 6.248_747_557_120_382e-7 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mracl_scalar_oracle() {
        // log(1 + e^{-(π/4)/0.07}), 40-digit mpmath
        let b = single(vec![1.0, 0.0], vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2], vec![vec![0.0, 1.0]]);
        let hyper = LossHyper {
            margin_m: 0.0,
            ..LossHyper::default()
        };
        let out = mracl_loss(&b, &hyper).unwrap();
        assert!((out.value - 1.340_369_068_503_291e-5).abs() < 1e-15);
    }

    #[test]
    fn mracl_all_masked_is_zero() {
        let b = single(vec![1.0, 0.0], vec![0.6, 0.8], vec![vec![0.0, 1.0], vec![-1.0, 0.0]])
            .with_mask(vec![vec![false, false]])
            .unwrap();
        let out = mracl_loss(&b, &LossHyper::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert_eq!(out.masked_negatives, 2);
    }

    #[test]
    fn l2_examples() {
        let b = single(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![-1.0, 0.0]]);
        assert_eq!(l2_contrastive_loss(&b, 1.0).unwrap().value, 0.0);
        let b = single(vec![1.0, 0.0], vec![0.0, 1.0], vec![]);
        assert!((l2_contrastive_loss(&b, 1.0).unwrap().value - 2.0).abs() < 1e-15);
    }

    #[test]
    fn false_negative_examples() {
        let dup = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let m = false_negative_mask(&dup, 0.5).unwrap();
        assert!(!m[0][1] && !m[1][0]);
        let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = false_negative_mask(&orth, 0.5).unwrap();
        assert!(m[0][1] && m[1][0]);
        // exact 0.5 with exactly representable coordinates
        let exact = vec![vec![0.0, 1.0, 1.0], vec![3.0, 0.0, 3.0]];
        assert_eq!(cosine_sim(&exact[0], &exact[1]).unwrap(), 0.5);
        assert!(false_negative_mask(&exact, 0.5).unwrap()[0][1]);
    }

    #[test]
    fn combined_examples() {
        let seg = Term {
            value: 1.0,
            grad: vec![1.0, 0.0],
        };
        let con = Term {
            value: 2.0,
            grad: vec![0.0, 10.0],
        };
        let (r, g) = combined_loss(&seg, &con, 0.1).unwrap();
        assert!((r.total - 1.2).abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-15);
        let (r, g) = combined_loss(&seg, &con, 0.0).unwrap();
        assert_eq!(r.total, 1.0);
        assert_eq!(g, seg.grad);
        assert_eq!(LossHyper::default().alpha, 0.1);
        let bad = Term {
            value: f64::NAN,
            grad: vec![0.0, 0.0],
        };
        assert!(combined_loss(&bad, &con, 0.1).is_err());
    }

    #[test]
    fn margin_units() {
        let h = LossHyper::default();
        assert!((h.margin_radians() - 0.209_439_510_239_319_55).abs() < 1e-15);
        let h = LossHyper {
            margin_m: 0.3,
            margin_unit: MarginUnit::Radians,
            ..h
        };
        assert_eq!(h.margin_radians(), 0.3);
        assert!(LossHyper { tau: 0.0, ..h }.validate().is_err());
        assert!(LossHyper { margin_m: -1.0, ..h }.validate().is_err());
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(ContrastiveBatch::new(vec![], vec![], vec![]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn batch_rejects_non_unit() {
        assert!(ContrastiveBatch::new(vec![vec![2.0, 0.0]], vec![vec![1.0, 0.0]], vec![vec![]]).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let b = single(
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![vec![1.0, 0.0], vec![1.0, 1e-9]],
        );
        let hyper = LossHyper {
            margin_m: 20.0,
            margin_unit: MarginUnit::Radians,
            ..LossHyper::default()
        };
        let out = mracl_loss(&b, &hyper).unwrap();
        assert!(out.value.is_finite());
        let hyper = LossHyper {
            margin_m: 20.0,
            margin_unit: MarginUnit::Degrees,
            ..hyper
        };
        assert!(mracl_loss(&b, &hyper).unwrap().value.is_finite());
    }
}
