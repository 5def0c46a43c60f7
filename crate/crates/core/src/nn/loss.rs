use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::tensor::Tensor;

/// Temperature-softened softmax of a logit vector.
pub fn soften(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(NnError::NonPositiveTemperature(tau));
    }
    let scaled: Vec<f64> = logits.iter().map(|s| s / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// `-(1 - p_t)^γ · ln p_t` for the predicted probability of the true class.
pub fn focal_loss(p_t: f64, gamma: f64) -> Result<f64> {
    if !(p_t > 0.0 && p_t <= 1.0) {
        return Err(NnError::ProbabilityOutOfRange(p_t));
    }
    if !(gamma >= 0.0) {
        return Err(NnError::InvalidConfig(format!("gamma {gamma} must be non-negative")));
    }
    Ok(-(1.0 - p_t).powf(gamma) * p_t.ln() + 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the hard-label term.
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub use_focal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.5, tau: 2.0, gamma: 1.0, use_focal: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NnError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(NnError::NonPositiveTemperature(self.tau));
        }
        if !(self.gamma >= 0.0) {
            return Err(NnError::InvalidConfig(format!("gamma {} must be non-negative", self.gamma)));
        }
        Ok(())
    }

    fn focal_gamma(&self) -> Option<f64> {
        self.use_focal.then_some(self.gamma)
    }
}

fn one_hot(labels: &[u8], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(NnError::InvalidLabel(y));
        }
        data[i * classes + y as usize] = 1.0;
    }
    Ok(Tensor::constant(labels.len(), classes, data)?)
}

/// Mean cross-entropy of `softmax(logits)` against `labels` over the batch,
/// focal-modulated with `(1 - p_t)^γ` when `focal_gamma` is set.
pub fn hard_loss(logits: &Tensor, labels: &[u8], focal_gamma: Option<f64>) -> Result<Tensor> {
    if logits.rows() != labels.len() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "hard_loss",
            lhs: logits.shape(),
            rhs: (labels.len(), logits.cols()),
        }
        .into());
    }
    let log_p = logits.log_softmax(1)?;
    let log_pt = log_p.mul(&one_hot(labels, logits.cols())?)?.sum(Some(1))?;
    let per_example = match focal_gamma {
        Some(gamma) if gamma != 0.0 => {
            let weight = Tensor::scalar(1.0).sub(&log_pt.exp()?)?.pow(gamma)?;
            weight.mul(&log_pt)?
        }
        _ => log_pt,
    };
    Ok(per_example.mean(None)?.scale(-1.0)?)
}

/// Components of the distillation objective.
#[derive(Debug, Clone)]
pub struct KdLoss {
    /// `α · hard + (1 − α) · soft`; the only term carrying gradients.
    pub total: Tensor,
    pub hard: f64,
    /// `τ² · KL(teacher_τ ‖ student_τ)`, batch mean.
    pub soft: f64,
}

/// Mixed hard-label / distillation loss. Teacher logits are used as constants.
pub fn kd_loss(student_logits: &Tensor, teacher_logits: &Tensor, labels: &[u8], cfg: &LossConfig) -> Result<KdLoss> {
    cfg.validate()?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            op: "kd_loss",
            lhs: student_logits.shape(),
            rhs: teacher_logits.shape(),
        }
        .into());
    }
    let hard = hard_loss(student_logits, labels, cfg.focal_gamma())?;

    let classes = teacher_logits.cols();
    let mut teacher_probs = Vec::with_capacity(teacher_logits.len());
    let mut teacher_entropy_term = 0.0;
    for r in 0..teacher_logits.rows() {
        let p = soften(&teacher_logits.row(r), cfg.tau)?;
        teacher_entropy_term += p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        teacher_probs.extend(p);
    }
    let batch = teacher_logits.rows() as f64;
    let teacher = Tensor::constant(teacher_logits.rows(), classes, teacher_probs)?;
    // KL(p_t ‖ p_s) = Σ p_t ln p_t − Σ p_t ln p_s; the first sum is constant.
    let cross = student_logits.scale(1.0 / cfg.tau)?.log_softmax(1)?.mul(&teacher)?.sum(None)?;
    let soft = cross
        .scale(-cfg.tau * cfg.tau / batch)?
        .add(&Tensor::scalar(cfg.tau * cfg.tau * teacher_entropy_term / batch))?;

    let total = if cfg.alpha == 1.0 {
        hard.clone()
    } else {
        hard.scale(cfg.alpha)?.add(&soft.scale(1.0 - cfg.alpha)?)?
    };
    Ok(KdLoss { hard: hard.item(), soft: soft.item(), total })
}
