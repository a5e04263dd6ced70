use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;

/// A differentiable model whose parameters can be perturbed one coordinate
/// at a time.
pub trait GradProbe: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    /// Builds the loss on `tape`, returning it and one leaf per tensor (in
    /// `tensors()` order).
    fn build_loss(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)>;
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

fn loss_value<P: GradProbe>(probe: &P) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = probe.build_loss(&mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients against central differences at `n_probes`
/// uniformly drawn trainable coordinates and returns the largest relative
/// error.
pub fn finite_diff_check<P: GradProbe>(probe: &P, n_probes: usize, seed: u64) -> Result<f64> {
    if n_probes == 0 {
        return Err(Error::contract("n_probes must be at least 1"));
    }
    let mut tape = Tape::new();
    let (loss, leaves) = probe.build_loss(&mut tape)?;
    tape.backward(loss)?;

    let sizes: Vec<(usize, usize)> = probe
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .map(|(i, t)| (i, t.numel()))
        .collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    if total == 0 {
        return Ok(0.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        for (i, n) in &sizes {
            if flat < *n {
                which = *i;
                break;
            }
            flat -= n;
        }
        let analytic = tape.grad(leaves[which]).map_or(0.0, |g| g[flat]);

        let mut plus = probe.clone();
        plus.tensors_mut()[which].data_mut()[flat] += STEP;
        let mut minus = probe.clone();
        minus.tensors_mut()[which].data_mut()[flat] -= STEP;
        let numeric = (loss_value(&plus)? - loss_value(&minus)?) / (2.0 * STEP);

        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}
