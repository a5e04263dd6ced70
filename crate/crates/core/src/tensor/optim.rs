use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be nonnegative", self.weight_decay)));
        }
        Ok(())
    }
}

/// Which entries of a tensor an optimizer step may touch.
#[derive(Clone, Copy, Debug)]
pub enum UpdateMask<'a> {
    Full,
    Frozen,
    Partial(&'a [bool]),
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
///
/// Per entry with mask bit set: `g' = g + wd·w`, `buf = μ·buf + g'`,
/// `w -= lr·buf`. Entries with the bit cleared are skipped entirely, so
/// both the weight and its momentum buffer stay bitwise unchanged.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Sgd {
            config,
            buffers: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Drops all momentum; called at every phase and domain boundary.
    pub fn reset_momentum(&mut self) {
        self.buffers.clear();
    }

    pub fn momentum_buffer(&self, slot: usize) -> Option<&[f64]> {
        self.buffers.get(slot).and_then(|b| b.as_deref())
    }

    /// Applies one update. `params[i]` keeps momentum slot `i` across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], masks: &[UpdateMask<'_>]) -> Result<()> {
        if params.len() != masks.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} masks",
                params.len(),
                masks.len()
            )));
        }
        if self.buffers.len() < params.len() {
            self.buffers.resize(params.len(), None);
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
        } = self.config;

        for (slot, (param, mask)) in params.iter_mut().zip(masks).enumerate() {
            if let UpdateMask::Partial(bits) = mask {
                if bits.len() != param.numel() {
                    return Err(Error::contract(format!(
                        "mask of {} bits for parameter of {} values",
                        bits.len(),
                        param.numel()
                    )));
                }
            }
            if matches!(mask, UpdateMask::Frozen) {
                continue;
            }
            let grad = param
                .grad()
                .ok_or_else(|| Error::contract(format!("parameter slot {slot} has no gradient")))?
                .to_vec();
            let n = param.numel();
            let buf = self.buffers[slot].get_or_insert_with(|| vec![0.0; n]);
            if buf.len() != n {
                return Err(Error::contract(format!("momentum buffer shape changed for slot {slot}")));
            }
            let w = param.data_mut();
            for i in 0..n {
                if let UpdateMask::Partial(bits) = mask {
                    if !bits[i] {
                        continue;
                    }
                }
                let g = grad[i] + wd * w[i];
                buf[i] = momentum * buf[i] + g;
                w[i] -= lr * buf[i];
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        Ok(())
    }
}
