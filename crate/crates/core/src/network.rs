//! Fully connected encoder with batch norm, a bottleneck and a linear
//! classifier: `input → [Linear → BN → ReLU]* → Linear → BN → Linear`.
//!
//! Prunable tensors are the encoder and bottleneck weight matrices. Biases,
//! batch-norm parameters and the classifier are never pruned. Masks are
//! applied functionally at forward time, so one parameter store serves
//! every domain's mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_ledger::{BitMask, PrunableTensor};
use crate::tensor::{finite_diff_check, GradProbe, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the hidden encoder layers.
    pub hidden: Vec<usize>,
    pub bottleneck_dim: usize,
    pub num_classes: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            input_dim: 16,
            hidden: vec![64, 64],
            bottleneck_dim: 32,
            num_classes: 8,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.bottleneck_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config(format!("bn momentum {} outside (0, 1]", self.bn_momentum)));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::Config("bn epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(in, out)`; the layer computes `x · W + b`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w = draw(fan_in * fan_out);
        let b = draw(fan_out);
        Linear {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w).with_grad(),
            bias: Tensor::from_parts(vec![fan_out], b).with_grad(),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(features: usize, momentum: f64, epsilon: f64) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::filled(&[features], 1.0).with_grad(),
            beta: Tensor::zeros(&[features]).with_grad(),
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum,
            epsilon,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    pub fn state(&self) -> BnLayerState {
        BnLayerState {
            gamma: self.gamma.data().to_vec(),
            beta: self.beta.data().to_vec(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
        }
    }

    pub fn load_state(&mut self, s: &BnLayerState) -> Result<()> {
        let n = self.features();
        if [s.gamma.len(), s.beta.len(), s.running_mean.len(), s.running_var.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::Bank(format!("bn state does not match a layer of {n} features")));
        }
        self.gamma.data_mut().copy_from_slice(&s.gamma);
        self.beta.data_mut().copy_from_slice(&s.beta);
        self.running_mean.copy_from_slice(&s.running_mean);
        self.running_var.copy_from_slice(&s.running_var);
        Ok(())
    }

    /// Records the layer on `tape`. In train mode normalizes with the biased
    /// batch variance and returns `(mean, unbiased var)` of the batch for the
    /// running update; in eval mode uses the running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        train: bool,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (batch, features) = tape.value(x).dims2();
        if features != self.features() {
            return Err(Error::dim(format!("bn expects {} features, got {features}", self.features())));
        }
        let (normalized, stats) = if train {
            if batch < 2 {
                return Err(Error::contract("train-mode batch norm needs a batch of at least 2"));
            }
            let mean = tape.mean_axis(x, 0)?;
            let centered = tape.sub(x, mean)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_axis(sq, 0)?;
            let shifted = tape.add_scalar(var, self.epsilon)?;
            let std = tape.pow(shifted, 0.5)?;
            let normalized = tape.div(centered, std)?;
            let unbias = batch as f64 / (batch as f64 - 1.0);
            let stats = (
                tape.value(mean).data().to_vec(),
                tape.value(var).data().iter().map(|v| v * unbias).collect(),
            );
            (normalized, Some(stats))
        } else {
            let mean = tape.constant(Tensor::from_parts(vec![features], self.running_mean.clone()));
            let std: Vec<f64> = self.running_var.iter().map(|v| (v + self.epsilon).sqrt()).collect();
            let std = tape.constant(Tensor::from_parts(vec![features], std));
            let centered = tape.sub(x, mean)?;
            (tape.div(centered, std)?, None)
        };
        let scaled = tape.mul(normalized, gamma)?;
        Ok((tape.add(scaled, beta)?, stats))
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running(&mut self, mean: &[f64], unbiased_var: &[f64]) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    Gamma(usize),
    Beta(usize),
    ClassifierWeight,
    ClassifierBias,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::Weight(i) => format!("block{i}.weight"),
            ParamId::Bias(i) => format!("block{i}.bias"),
            ParamId::Gamma(i) => format!("block{i}.bn.gamma"),
            ParamId::Beta(i) => format!("block{i}.bn.beta"),
            ParamId::ClassifierWeight => "classifier.weight".into(),
            ParamId::ClassifierBias => "classifier.bias".into(),
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self, ParamId::Gamma(_) | ParamId::Beta(_))
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, ParamId::ClassifierWeight | ParamId::ClassifierBias)
    }
}

/// Result of recording a forward pass on a tape.
#[derive(Debug)]
pub struct Trace {
    pub logits: Var,
    /// Leaf handle of every parameter, in `Network::param_ids` order.
    pub params: Vec<(ParamId, Var)>,
    /// Output of each block, before any BN (what feeds that block's BN).
    pub pre_bn: Vec<Var>,
    batch_stats: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    blocks: Vec<Block>,
    classifier: Linear,
}

impl Network {
    pub fn init(arch: &Architecture, seed: u64) -> Result<Network> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut prev = arch.input_dim;
        for &width in &arch.hidden {
            blocks.push(Block {
                linear: Linear::init(prev, width, &mut rng),
                bn: Some(BatchNorm::new(width, arch.bn_momentum, arch.bn_epsilon)),
                relu: true,
            });
            prev = width;
        }
        blocks.push(Block {
            linear: Linear::init(prev, arch.bottleneck_dim, &mut rng),
            bn: Some(BatchNorm::new(arch.bottleneck_dim, arch.bn_momentum, arch.bn_epsilon)),
            relu: false,
        });
        let classifier = Linear::init(arch.bottleneck_dim, arch.num_classes, &mut rng);
        Ok(Network {
            arch: arch.clone(),
            blocks,
            classifier,
        })
    }

    /// Assembles a network from explicit layers; used for hand-built
    /// topologies in tests and tools.
    pub fn from_parts(arch: Architecture, blocks: Vec<Block>, classifier: Linear) -> Result<Network> {
        let mut prev = arch.input_dim;
        for (i, b) in blocks.iter().enumerate() {
            if b.linear.fan_in() != prev || b.linear.bias.numel() != b.linear.fan_out() {
                return Err(Error::Config(format!("block {i} does not chain")));
            }
            if let Some(bn) = &b.bn {
                if bn.features() != b.linear.fan_out() {
                    return Err(Error::Config(format!("block {i} bn width mismatch")));
                }
            }
            prev = b.linear.fan_out();
        }
        if classifier.fan_in() != prev || classifier.fan_out() != arch.num_classes {
            return Err(Error::Config("classifier does not chain".into()));
        }
        Ok(Network {
            arch,
            blocks,
            classifier,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    /// Block index of the batch-norm layer nearest the input.
    pub fn first_bn_id(&self) -> Option<usize> {
        self.blocks.iter().position(|b| b.bn.is_some())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            ids.push(ParamId::Weight(i));
            ids.push(ParamId::Bias(i));
            if b.bn.is_some() {
                ids.push(ParamId::Gamma(i));
                ids.push(ParamId::Beta(i));
            }
        }
        ids.push(ParamId::ClassifierWeight);
        ids.push(ParamId::ClassifierBias);
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        let bn = |i: usize| self.blocks[i].bn.as_ref().expect("param id refers to an existing bn");
        match id {
            ParamId::Weight(i) => &self.blocks[i].linear.weight,
            ParamId::Bias(i) => &self.blocks[i].linear.bias,
            ParamId::Gamma(i) => &bn(i).gamma,
            ParamId::Beta(i) => &bn(i).beta,
            ParamId::ClassifierWeight => &self.classifier.weight,
            ParamId::ClassifierBias => &self.classifier.bias,
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::Weight(i) => &mut self.blocks[i].linear.weight,
            ParamId::Bias(i) => &mut self.blocks[i].linear.bias,
            ParamId::Gamma(i) => &mut self.blocks[i].bn.as_mut().expect("bn exists").gamma,
            ParamId::Beta(i) => &mut self.blocks[i].bn.as_mut().expect("bn exists").beta,
            ParamId::ClassifierWeight => &mut self.classifier.weight,
            ParamId::ClassifierBias => &mut self.classifier.bias,
        }
    }

    /// All parameters, mutably, in `param_ids` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.linear.weight);
            out.push(&mut b.linear.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param(id).numel()).sum()
    }

    pub fn prunable_ids(&self) -> Vec<ParamId> {
        (0..self.blocks.len()).map(ParamId::Weight).collect()
    }

    pub fn prunable_tensors(&self) -> Vec<PrunableTensor> {
        self.prunable_ids()
            .into_iter()
            .map(|id| PrunableTensor {
                name: id.name(),
                len: self.param(id).numel(),
            })
            .collect()
    }

    pub fn prunable_weights(&self) -> Vec<&Tensor> {
        self.blocks.iter().map(|b| &b.linear.weight).collect()
    }

    pub fn zero_outside(&mut self, masks: &[BitMask]) -> Result<()> {
        self.check_masks(Some(masks))?;
        for (b, m) in self.blocks.iter_mut().zip(masks) {
            for (w, &keep) in b.linear.weight.data_mut().iter_mut().zip(m.bits()) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = &BatchNorm> {
        self.blocks.iter().filter_map(|b| b.bn.as_ref())
    }

    pub fn bn_state(&self) -> Vec<BnLayerState> {
        self.bn_layers().map(BatchNorm::state).collect()
    }

    pub fn load_bn_state(&mut self, state: &[BnLayerState]) -> Result<()> {
        let layers: Vec<&mut BatchNorm> = self.blocks.iter_mut().filter_map(|b| b.bn.as_mut()).collect();
        if layers.len() != state.len() {
            return Err(Error::Bank(format!(
                "bn state has {} layers, network has {}",
                state.len(),
                layers.len()
            )));
        }
        for (layer, s) in layers.into_iter().zip(state) {
            layer.load_state(s)?;
        }
        Ok(())
    }

    /// Batch-norm state of a freshly constructed layer stack.
    pub fn default_bn_state(&self) -> Vec<BnLayerState> {
        self.bn_layers()
            .map(|bn| BatchNorm::new(bn.features(), bn.momentum, bn.epsilon).state())
            .collect()
    }

    fn check_masks(&self, masks: Option<&[BitMask]>) -> Result<()> {
        let Some(masks) = masks else { return Ok(()) };
        if masks.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "{} masks for {} prunable tensors",
                masks.len(),
                self.blocks.len()
            )));
        }
        for (i, (b, m)) in self.blocks.iter().zip(masks).enumerate() {
            if m.len() != b.linear.weight.numel() {
                return Err(Error::contract(format!("mask {i} has {} bits for {} weights", m.len(), b.linear.weight.numel())));
            }
        }
        Ok(())
    }

    /// Records a full forward pass. Running statistics are not touched;
    /// `forward_train` applies them.
    pub fn record(&self, tape: &mut Tape, x: &Tensor, masks: Option<&[BitMask]>, train: bool) -> Result<Trace> {
        self.record_until(tape, x, masks, train, None)
    }

    fn record_until(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        masks: Option<&[BitMask]>,
        train: bool,
        stop_after_linear: Option<usize>,
    ) -> Result<Trace> {
        self.check_masks(masks)?;
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::dim(format!(
                "input of shape {:?} for a network with {} inputs",
                x.shape(),
                self.arch.input_dim
            )));
        }
        let mut params = Vec::new();
        let mut pre_bn = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = tape.constant(x.detached());
        for (i, b) in self.blocks.iter().enumerate() {
            let w = tape.leaf(&b.linear.weight);
            let bias = tape.leaf(&b.linear.bias);
            params.push((ParamId::Weight(i), w));
            params.push((ParamId::Bias(i), bias));
            let w_eff = match masks {
                Some(m) => tape.mask(w, m[i].bits())?,
                None => w,
            };
            let z = tape.matmul(h, w_eff)?;
            h = tape.add(z, bias)?;
            pre_bn.push(h);
            if stop_after_linear == Some(i) {
                return Ok(Trace {
                    logits: h,
                    params,
                    pre_bn,
                    batch_stats,
                });
            }
            if let Some(bn) = &b.bn {
                let gamma = tape.leaf(&bn.gamma);
                let beta = tape.leaf(&bn.beta);
                params.push((ParamId::Gamma(i), gamma));
                params.push((ParamId::Beta(i), beta));
                let (out, stats) = bn.forward(tape, h, gamma, beta, train)?;
                batch_stats.push(stats);
                h = out;
            } else {
                batch_stats.push(None);
            }
            if b.relu {
                h = tape.relu(h)?;
            }
        }
        let w = tape.leaf(&self.classifier.weight);
        let bias = tape.leaf(&self.classifier.bias);
        params.push((ParamId::ClassifierWeight, w));
        params.push((ParamId::ClassifierBias, bias));
        let z = tape.matmul(h, w)?;
        let logits = tape.add(z, bias)?;
        Ok(Trace {
            logits,
            params,
            pre_bn,
            batch_stats,
        })
    }

    /// Train-mode forward: batch statistics normalize and update running
    /// statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, x: &Tensor, masks: Option<&[BitMask]>) -> Result<Trace> {
        let trace = self.record(tape, x, masks, true)?;
        for (b, stats) in self.blocks.iter_mut().zip(&trace.batch_stats) {
            if let (Some(bn), Some((mean, var))) = (&mut b.bn, stats) {
                bn.update_running(mean, var);
            }
        }
        Ok(trace)
    }

    /// Eval-mode logits; never mutates the network.
    pub fn forward_eval(&self, x: &Tensor, masks: Option<&[BitMask]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, x, masks, false)?;
        Ok(tape.value(trace.logits).detached())
    }

    /// Activations entering the first batch-norm layer under `masks`.
    pub fn first_bn_input(&self, x: &Tensor, masks: Option<&[BitMask]>) -> Result<Tensor> {
        let first = self
            .first_bn_id()
            .ok_or_else(|| Error::Config("network has no batch-norm layer".into()))?;
        let mut tape = Tape::new();
        let trace = self.record_until(&mut tape, x, masks, false, Some(first))?;
        Ok(tape.value(trace.pre_bn[first]).detached())
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Accumulates tape gradients into the parameters' grad slots.
    pub fn absorb_grads(&mut self, tape: &Tape, trace: &Trace) -> Result<()> {
        for (id, var) in &trace.params {
            if let Some(g) = tape.grad(*var) {
                let g = g.to_vec();
                self.param_mut(*id).accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    /// Central-difference check of the train-mode loss `loss(logits)` on
    /// batch `x` at `n_probes` random coordinates.
    pub fn finite_diff_check<F>(&self, x: &Tensor, masks: Option<&[BitMask]>, loss: F, n_probes: usize, seed: u64) -> Result<f64>
    where
        F: Fn(&mut Tape, Var) -> Result<Var> + Clone,
    {
        let probe = NetworkProbe {
            net: self.clone(),
            x,
            masks,
            loss,
        };
        finite_diff_check(&probe, n_probes, seed)
    }
}

#[derive(Clone)]
struct NetworkProbe<'a, F> {
    net: Network,
    x: &'a Tensor,
    masks: Option<&'a [BitMask]>,
    loss: F,
}

impl<F> GradProbe for NetworkProbe<'_, F>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Clone,
{
    fn tensors(&self) -> Vec<&Tensor> {
        self.net.param_ids().into_iter().map(|id| self.net.param(id)).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }

    fn build_loss(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let trace = self.net.record(tape, self.x, self.masks, true)?;
        let loss = (self.loss)(tape, trace.logits)?;
        Ok((loss, trace.params.iter().map(|p| p.1).collect()))
    }
}
