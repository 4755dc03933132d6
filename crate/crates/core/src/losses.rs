//! Training objectives: pixel-wise heatmap BCE, class-balanced focal loss
//! for the in/out-of-frame head, their weighted combination, and an
//! MSE+KL alternative for the heatmap term.
//!
//! Each loss comes in two forms: a plain `f64` function for evaluation and
//! oracle checks, and an `_on_tape` variant that composes autodiff ops so
//! the training loop can backpropagate through it. Both share the same
//! probability clamp, so their values agree to machine precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Which loss the heatmap head trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapLossKind {
    Bce,
    MseKl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the focal term in the combined objective.
    pub lambda: f64,
    /// Class weighting factor, the minor/major class count ratio.
    pub alpha: f64,
    /// Focusing parameter of the focal loss.
    pub gamma: f64,
    pub heatmap_loss_kind: HeatmapLossKind,
    /// Weight of the KL term when `heatmap_loss_kind` is `MseKl`.
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            alpha: 1.0,
            gamma: 2.0,
            heatmap_loss_kind: HeatmapLossKind::Bce,
            kl_weight: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!(
                "alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.kl_weight < 0.0 || !self.kl_weight.is_finite() {
            return Err(Error::config(format!(
                "kl_weight must be >= 0, got {}",
                self.kl_weight
            )));
        }
        Ok(())
    }
}

/// Per-component values of one evaluation of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub heatmap: f64,
    pub focal: f64,
}

/// The combined objective as tape nodes, for backpropagation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub heatmap: Var,
    pub focal: Var,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross-entropy of a single probability against a binary label.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Class-balanced focal loss `alpha * (1 - p_t)^gamma * BCE(p, y)` where
/// `p_t` is the probability assigned to the true class.
pub fn focal(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let p_t = if y { p } else { 1.0 - p };
    alpha * (1.0 - p_t).powf(gamma) * (-p_t.ln())
}

/// Mean over pixels of `-t ln p - (1-t) ln(1-p)`.
pub fn heatmap_bce(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_heatmap_pair(pred, target)?;
    let mut acc = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let p = clamp_prob(p);
        acc += -t * p.ln() - (1.0 - t) * (1.0 - p).ln();
    }
    Ok(acc / pred.len() as f64)
}

/// Mean squared error plus `kl_weight` times `KL(target || pred)`, with
/// both maps renormalized to distributions for the KL term. An all-zero
/// target has no distribution to compare against, so its KL term is zero.
pub fn heatmap_mse_kl(pred: &[f64], target: &[f64], kl_weight: f64) -> Result<f64> {
    check_heatmap_pair(pred, target)?;
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / n;
    let t_sum: f64 = target.iter().sum();
    if t_sum <= 0.0 {
        return Ok(mse);
    }
    let p_sum: f64 = pred.iter().map(|&p| clamp_prob(p)).sum();
    let mut kl = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if t > 0.0 {
            let t_hat = t / t_sum;
            let p_hat = clamp_prob(p) / p_sum;
            kl += t_hat * (t_hat / p_hat).ln();
        }
    }
    Ok(mse + kl_weight * kl)
}

fn check_heatmap_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "heatmap_loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::config("heatmap loss over an empty map"));
    }
    if let Some(&bad) = target.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::numeric(format!(
            "heatmap target value {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Class weighting factor from the label distribution: the count of the
/// minority class over the count of the majority class.
pub fn compute_alpha(labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::config(
            "all in/out labels belong to one class; set alpha explicitly",
        ));
    }
    Ok(pos.min(neg) as f64 / pos.max(neg) as f64)
}

/// Combined objective `L_heatmap + lambda * L_focal` on plain values.
pub fn total_loss(
    pred_heatmap: &[f64],
    pred_in_prob: f64,
    target_heatmap: &[f64],
    in_frame: bool,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let heatmap = match cfg.heatmap_loss_kind {
        HeatmapLossKind::Bce => heatmap_bce(pred_heatmap, target_heatmap)?,
        HeatmapLossKind::MseKl => heatmap_mse_kl(pred_heatmap, target_heatmap, cfg.kl_weight)?,
    };
    let focal = focal(pred_in_prob, in_frame, cfg.alpha, cfg.gamma);
    Ok(LossBreakdown {
        total: heatmap + cfg.lambda * focal,
        heatmap,
        focal,
    })
}

// ── Tape-composed variants ──────────────────────────────────────────────

/// `-ln(p_t)` of the true class, times `alpha * (1 - p_t)^gamma`, where
/// `p` is a single-element tensor of the predicted in-frame probability.
pub fn focal_on_tape(tape: &mut Tape, p: Var, y: bool, alpha: f64, gamma: f64) -> Result<Var> {
    if tape.value(p).numel() != 1 {
        return Err(Error::ShapeMismatch {
            op: "focal_on_tape",
            lhs: tape.shape(p).to_vec(),
            rhs: vec![1],
        });
    }
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let p_t = if y { p } else { tape.one_minus(p) };
    let log_pt = tape.ln(p_t);
    let nll = tape.neg(log_pt);
    let miss = tape.one_minus(p_t);
    let modulator = tape.pow_const(miss, gamma);
    let weighted = tape.mul(modulator, nll)?;
    Ok(tape.mul_scalar(weighted, alpha))
}

/// Pixel-mean BCE between a predicted probability map and a constant target.
pub fn heatmap_bce_on_tape(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    check_heatmap_pair(tape.data(pred), target)?;
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(shape.clone(), target.to_vec())?;
    let one_minus_t = tape.one_minus(t);
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = tape.ln(p);
    let one_minus_p = tape.one_minus(p);
    let log_1p = tape.ln(one_minus_p);
    let pos = tape.mul(t, log_p)?;
    let neg = tape.mul(one_minus_t, log_1p)?;
    let sum = tape.add(pos, neg)?;
    let m = tape.mean(sum);
    Ok(tape.neg(m))
}

/// MSE plus weighted `KL(target || pred)` with both maps renormalized.
pub fn heatmap_mse_kl_on_tape(
    tape: &mut Tape,
    pred: Var,
    target: &[f64],
    kl_weight: f64,
) -> Result<Var> {
    check_heatmap_pair(tape.data(pred), target)?;
    let shape = tape.shape(pred).to_vec();
    let t = tape.constant(shape.clone(), target.to_vec())?;
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq);

    let t_sum: f64 = target.iter().sum();
    if t_sum <= 0.0 || kl_weight == 0.0 {
        return Ok(mse);
    }
    // KL(t_hat || p_hat) = sum t_hat ln t_hat - sum t_hat ln p_hat; the
    // first term is a constant of the target.
    let t_entropy: f64 = target
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let th = v / t_sum;
            th * th.ln()
        })
        .sum();
    let p = tape.clamp(pred, PROB_EPS, 1.0 - PROB_EPS);
    let p_sum = tape.sum(p);
    let inv_sum = tape.recip(p_sum);
    let p_hat = tape.scale_by(p, inv_sum)?;
    let log_p_hat = tape.ln(p_hat);
    let cross = tape.mul(t, log_p_hat)?;
    let cross_sum = tape.sum(cross);
    let cross_scaled = tape.mul_scalar(cross_sum, 1.0 / t_sum);
    let neg_cross = tape.neg(cross_scaled);
    let kl = tape.add_scalar(neg_cross, t_entropy);
    let kl_term = tape.mul_scalar(kl, kl_weight);
    tape.add(mse, kl_term)
}

/// Combined objective on the tape, returning total and per-term nodes.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    pred_heatmap: Var,
    pred_in_prob: Var,
    target_heatmap: &[f64],
    in_frame: bool,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let heatmap = match cfg.heatmap_loss_kind {
        HeatmapLossKind::Bce => heatmap_bce_on_tape(tape, pred_heatmap, target_heatmap)?,
        HeatmapLossKind::MseKl => {
            heatmap_mse_kl_on_tape(tape, pred_heatmap, target_heatmap, cfg.kl_weight)?
        }
    };
    let focal = focal_on_tape(tape, pred_in_prob, in_frame, cfg.alpha, cfg.gamma)?;
    let weighted = tape.mul_scalar(focal, cfg.lambda);
    let total = tape.add(heatmap, weighted)?;
    Ok(LossTerms {
        total,
        heatmap,
        focal,
    })
}
