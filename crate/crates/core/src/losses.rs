//! Label-smoothed cross-entropy for the labelled source domain and the
//! information-maximization objective for unlabelled targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub smoothing_alpha: f64,
    pub im_div_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            smoothing_alpha: 0.1,
            im_div_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing_alpha) {
            return Err(Error::Config(format!("smoothing alpha {} outside [0, 1)", self.smoothing_alpha)));
        }
        if !(self.im_div_weight >= 0.0 && self.im_div_weight.is_finite()) {
            return Err(Error::Config("im_div_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `q = (1 − α)·onehot + α/K`.
pub fn smoothed_targets(labels: &[usize], k: usize, alpha: f64) -> Result<Tensor> {
    let mut data = vec![alpha / k as f64; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!("label {y} out of range for {k} classes")));
        }
        data[i * k + y] += 1.0 - alpha;
    }
    Tensor::matrix(labels.len(), k, data)
}

/// `−mean_b Σ_k q_k log softmax_k(logits)`.
pub fn label_smoothed_ce(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (batch, k) = tape.value(logits).dims2();
    if labels.len() != batch {
        return Err(Error::dim(format!("{} labels for a batch of {batch}", labels.len())));
    }
    let q = tape.constant(smoothed_targets(labels, k, alpha)?);
    let log_p = tape.log_softmax(logits)?;
    let weighted = tape.mul(q, log_p)?;
    let per_sample = tape.sum_axis(weighted, 1)?;
    let mean = tape.mean(per_sample)?;
    tape.scale(mean, -1.0)
}

fn clamped_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let clamped = tape.clamp_min(p, PROB_FLOOR)?;
    tape.log(clamped)
}

/// Mean per-sample prediction entropy `−Σ_k p_k log p_k`.
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let log_p = clamped_log(tape, p)?;
    let plogp = tape.mul(p, log_p)?;
    let per_sample = tape.sum_axis(plogp, 1)?;
    let mean = tape.mean(per_sample)?;
    tape.scale(mean, -1.0)
}

/// `Σ_k p̂_k log p̂_k` with `p̂` the batch-mean prediction.
pub fn diversity_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let p = tape.softmax(logits)?;
    let p_hat = tape.mean_axis(p, 0)?;
    let log_p_hat = clamped_log(tape, p_hat)?;
    let terms = tape.mul(p_hat, log_p_hat)?;
    tape.sum(terms)
}

/// Entropy plus weighted diversity; minimized during target adaptation.
pub fn im_loss(tape: &mut Tape, logits: Var, div_weight: f64) -> Result<Var> {
    let ent = entropy_loss(tape, logits)?;
    let div = diversity_loss(tape, logits)?;
    let div = tape.scale(div, div_weight)?;
    tape.add(ent, div)
}
