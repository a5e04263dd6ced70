//! Source training, sequential target adaptation and the unmasked baseline.
//!
//! Parameter roles by phase:
//!
//! | phase            | prunable weights     | biases | BN γ/β | classifier |
//! |------------------|----------------------|--------|--------|------------|
//! | source train     | all                  | train  | train  | train      |
//! | source fine-tune | `M_0`                | train  | train  | train      |
//! | adapt            | outside `M_{t-1}`    | frozen | train  | frozen     |
//! | adapt fine-tune  | `M_t \ M_{t-1}`      | frozen | train  | frozen     |
//!
//! Encoder biases are shared by every domain's subnetwork, so they stop
//! moving once the source model is done. Batch-norm state is per domain
//! through the bank.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bn_bank::BnBank;
use crate::config::Config;
use crate::datagen::{derive_seed, DomainData, Split};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, domain_accuracy};
use crate::losses::{im_loss, label_smoothed_ce};
use crate::mask_ledger::{BitMask, MaskLedger, Phase};
use crate::metrics::EpochRecord;
use crate::network::{Network, ParamId};
use crate::tensor::{Sgd, SgdConfig, Tape, Tensor, UpdateMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnReset {
    /// Batch-norm state of the trained source model.
    SourceTrained,
    /// Freshly initialized batch norm (γ = 1, β = 0, unit running stats).
    ArchitectureDefault,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    /// Fraction of each prunable tensor claimed per domain. Empty means
    /// `1 / n_domains` each.
    #[serde(default)]
    pub keep_fractions: Vec<f64>,
    pub epochs_train: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub source_lr: f64,
    pub adapt_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub smoothing_alpha: f64,
    pub im_div_weight: f64,
    #[serde(default = "default_bn_reset")]
    pub bn_reset: BnReset,
    /// Re-draw unclaimed weights before each adaptation instead of starting
    /// them from zero.
    #[serde(default)]
    pub reinit_free_weights: bool,
}

fn default_bn_reset() -> BnReset {
    BnReset::SourceTrained
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            keep_fractions: Vec::new(),
            epochs_train: 30,
            epochs_finetune: 10,
            batch_size: 64,
            source_lr: 1e-2,
            adapt_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            smoothing_alpha: 0.1,
            im_div_weight: 1.0,
            bn_reset: BnReset::SourceTrained,
            reinit_free_weights: false,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self, n_domains: usize) -> Result<()> {
        if n_domains == 0 {
            return Err(Error::Config("plan has no domains".into()));
        }
        if self.epochs_train == 0 || self.epochs_finetune == 0 {
            return Err(Error::Config("epoch counts must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !self.keep_fractions.is_empty() && self.keep_fractions.len() != n_domains {
            return Err(Error::Config(format!(
                "{} keep fractions for {n_domains} domains",
                self.keep_fractions.len()
            )));
        }
        let fractions = self.fractions(n_domains);
        if fractions.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
            return Err(Error::Config("keep fractions must lie in (0, 1]".into()));
        }
        if fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::Config("keep fractions sum to more than 1".into()));
        }
        self.sgd(self.source_lr).validate()?;
        self.sgd(self.adapt_lr).validate()?;
        if !(0.0..1.0).contains(&self.smoothing_alpha) || !(self.im_div_weight >= 0.0) {
            return Err(Error::Config("loss weights out of range".into()));
        }
        Ok(())
    }

    pub fn fractions(&self, n_domains: usize) -> Vec<f64> {
        if self.keep_fractions.is_empty() {
            vec![1.0 / n_domains as f64; n_domains]
        } else {
            self.keep_fractions.clone()
        }
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything that persists between domains.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineState {
    pub net: Network,
    pub ledger: MaskLedger,
    pub bank: BnBank,
    /// Test accuracy of each domain right after it was trained.
    pub accuracy_after: Vec<f64>,
}

impl PipelineState {
    pub fn next_domain(&self) -> usize {
        self.ledger.domains()
    }
}

#[derive(Clone, Debug)]
pub struct SequenceResult {
    pub state: PipelineState,
    pub records: Vec<EpochRecord>,
}

/// What a phase optimizes and which parameters it may change.
#[derive(Clone, Copy, Debug)]
pub struct PhaseSpec<'a> {
    pub name: &'static str,
    pub domain: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mask applied in the forward pass.
    pub forward_masks: Option<&'a [BitMask]>,
    /// Trainable entries of each prunable tensor; `None` trains all.
    pub weight_masks: Option<&'a [BitMask]>,
    pub train_biases: bool,
    pub train_classifier: bool,
}

/// Labels present: label-smoothed cross-entropy. Absent: information
/// maximization.
pub fn train_phase(
    net: &mut Network,
    inputs: &Tensor,
    labels: Option<&[usize]>,
    spec: &PhaseSpec<'_>,
    plan: &TrainPlan,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::Data(format!("{} needs at least 2 samples, got {n}", spec.name)));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", l.len())));
        }
    }
    let ids = net.param_ids();
    let mut opt = Sgd::new(plan.sgd(spec.learning_rate))?;
    let tag = (spec.domain as u64) << 16 ^ phase_tag(spec.name);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    let masks: Vec<UpdateMask<'_>> = ids
        .iter()
        .map(|id| match *id {
            ParamId::Weight(i) => match spec.weight_masks {
                Some(m) => UpdateMask::Partial(m[i].bits()),
                None => UpdateMask::Full,
            },
            ParamId::Bias(_) if !spec.train_biases => UpdateMask::Frozen,
            ParamId::ClassifierWeight | ParamId::ClassifierBias if !spec.train_classifier => UpdateMask::Frozen,
            _ => UpdateMask::Full,
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..spec.epochs {
        shuffle(&mut order, &mut rng);
        let (mut loss_sum, mut batches, mut correct, mut seen) = (0.0, 0usize, 0usize, 0usize);
        for idx in order.chunks(plan.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let x = inputs.gather_rows(idx);
            let mut tape = Tape::new();
            let trace = net.forward_train(&mut tape, &x, spec.forward_masks)?;
            let loss = match labels {
                Some(l) => {
                    let y: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
                    let logits = tape.value(trace.logits);
                    correct += (accuracy(logits, &y)? * y.len() as f64).round() as usize;
                    seen += y.len();
                    label_smoothed_ce(&mut tape, trace.logits, &y, plan.smoothing_alpha)?
                }
                None => im_loss(&mut tape, trace.logits, plan.im_div_weight)?,
            };
            loss_sum += tape.value(loss).item();
            batches += 1;
            tape.backward(loss)?;
            net.zero_grad();
            net.absorb_grads(&tape, &trace)?;
            opt.step(&mut net.params_mut(), &masks)?;
        }
        log.push(EpochRecord {
            phase: spec.name.to_string(),
            domain: spec.domain,
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            accuracy: (seen > 0).then(|| correct as f64 / seen as f64),
        });
    }
    net.zero_grad();
    Ok(())
}

fn phase_tag(name: &str) -> u64 {
    name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher–Yates; kept local so batch order is independent of crate versions
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Dense supervised training of every parameter.
pub fn source_pretrain(net: &mut Network, split: &Split, plan: &TrainPlan, seed: u64, log: &mut Vec<EpochRecord>) -> Result<()> {
    let spec = PhaseSpec {
        name: "source_train",
        domain: 0,
        epochs: plan.epochs_train,
        learning_rate: plan.source_lr,
        forward_masks: None,
        weight_masks: None,
        train_biases: true,
        train_classifier: true,
    };
    train_phase(net, &split.inputs, Some(&split.labels), &spec, plan, seed, log)
}

/// Prunes to `M_0` keeping fraction `p` and fine-tunes the kept weights.
pub fn source_prune_finetune(
    net: &mut Network,
    ledger: &mut MaskLedger,
    split: &Split,
    p: f64,
    plan: &TrainPlan,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    if ledger.domains() != 0 {
        return Err(Error::Ledger("source pruning needs an empty ledger".into()));
    }
    let m0 = ledger.extend(net, p)?;
    let grad = ledger.gradient_mask(0, Phase::Finetune)?;
    let spec = PhaseSpec {
        name: "source_finetune",
        domain: 0,
        epochs: plan.epochs_finetune,
        learning_rate: plan.source_lr,
        forward_masks: Some(&m0),
        weight_masks: Some(&grad),
        train_biases: true,
        train_classifier: true,
    };
    train_phase(net, &split.inputs, Some(&split.labels), &spec, plan, seed, log)
}

/// Full source procedure: dense training, pruning to `M_0`, fine-tuning,
/// then the domain-0 batch-norm snapshot which also serves as the reset
/// point for later domains.
pub fn train_source(
    mut net: Network,
    split: &Split,
    p0: f64,
    plan: &TrainPlan,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<PipelineState> {
    if split.is_empty() {
        return Err(Error::Data("source split is empty".into()));
    }
    source_pretrain(&mut net, split, plan, seed, log)?;
    let mut ledger = MaskLedger::for_network(&net);
    source_prune_finetune(&mut net, &mut ledger, split, p0, plan, seed, log)?;
    let mut bank = BnBank::new();
    bank.snapshot(&net, 0)?;
    bank.set_source_init(net.bn_state());
    Ok(PipelineState {
        net,
        ledger,
        bank,
        accuracy_after: Vec::new(),
    })
}

/// Adapts to the next domain from unlabelled inputs. Returns its index.
pub fn adapt_domain(
    state: &mut PipelineState,
    inputs: &Tensor,
    p: f64,
    plan: &TrainPlan,
    seed: u64,
    log: &mut Vec<EpochRecord>,
) -> Result<usize> {
    let t = state.next_domain();
    if t == 0 {
        return Err(Error::Ledger("adaptation needs a trained source domain".into()));
    }
    match plan.bn_reset {
        BnReset::SourceTrained => state.bank.reset_to_source(&mut state.net)?,
        BnReset::ArchitectureDefault => {
            let fresh = state.net.default_bn_state();
            state.net.load_bn_state(&fresh)?;
        }
    }
    let adapt_mask = state.ledger.gradient_mask(t, Phase::Adapt)?;
    if plan.reinit_free_weights {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (t as u64) << 16 ^ 0xF8EE));
        for (block, free) in state.net.blocks_mut().iter_mut().zip(&adapt_mask) {
            let bound = 1.0 / (block.linear.fan_in() as f64).sqrt();
            for (w, &f) in block.linear.weight.data_mut().iter_mut().zip(free.bits()) {
                if f {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
    }
    let spec = PhaseSpec {
        name: "adapt",
        domain: t,
        epochs: plan.epochs_train,
        learning_rate: plan.adapt_lr,
        forward_masks: None,
        weight_masks: Some(&adapt_mask),
        train_biases: false,
        train_classifier: false,
    };
    train_phase(&mut state.net, inputs, None, &spec, plan, seed, log)?;

    let mt = state.ledger.extend(&mut state.net, p)?;
    let ft_mask = state.ledger.gradient_mask(t, Phase::Finetune)?;
    let spec = PhaseSpec {
        name: "adapt_finetune",
        epochs: plan.epochs_finetune,
        forward_masks: Some(&mt),
        weight_masks: Some(&ft_mask),
        ..spec
    };
    train_phase(&mut state.net, inputs, None, &spec, plan, seed, log)?;
    state.bank.snapshot(&state.net, t)?;
    Ok(t)
}

/// Runs (or resumes) the whole sequence. With `stop_after = Some(k)` the
/// run halts once domains `0..=k` are done.
pub fn run_sequence(
    config: &Config,
    data: &[DomainData],
    resume: Option<PipelineState>,
    stop_after: Option<usize>,
) -> Result<SequenceResult> {
    config.validate()?;
    if data.len() != config.data.domains.len() {
        return Err(Error::Config(format!(
            "{} datasets for {} configured domains",
            data.len(),
            config.data.domains.len()
        )));
    }
    let plan = &config.training;
    let fractions = plan.fractions(data.len());
    let mut log = Vec::new();
    let mut state = match resume {
        Some(s) => s,
        None => {
            let net = Network::init(&config.architecture, config.seed)?;
            let mut s = train_source(net, &data[0].train, fractions[0], plan, config.seed, &mut log)?;
            let acc = domain_accuracy(&mut s.net, &s.ledger, &s.bank, 0, &data[0].test)?;
            s.accuracy_after.push(acc);
            s
        }
    };
    if state.accuracy_after.len() != state.next_domain() {
        return Err(Error::Contract("pipeline state history does not match its ledger".into()));
    }
    let last = stop_after.map_or(data.len() - 1, |k| k.min(data.len() - 1));
    while state.next_domain() <= last {
        let t = state.next_domain();
        adapt_domain(&mut state, &data[t].train.inputs, fractions[t], plan, config.seed, &mut log)?;
        let acc = domain_accuracy(&mut state.net, &state.ledger, &state.bank, t, &data[t].test)?;
        state.accuracy_after.push(acc);
    }
    Ok(SequenceResult { state, records: log })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub accuracy_after: Vec<f64>,
    pub accuracy_end: Vec<f64>,
    pub records: Vec<EpochRecord>,
}

/// Sequential information-maximization adaptation of one shared model:
/// no pruning, no masks, no batch-norm bank. The classifier stays frozen.
pub fn run_baseline(config: &Config, data: &[DomainData]) -> Result<BaselineResult> {
    config.validate()?;
    let plan = &config.training;
    let mut log = Vec::new();
    let mut net = Network::init(&config.architecture, config.seed)?;
    source_pretrain(&mut net, &data[0].train, plan, config.seed, &mut log)?;
    let eval = |net: &Network, split: &Split| -> Result<f64> { accuracy(&net.forward_eval(&split.inputs, None)?, &split.labels) };
    let mut after = vec![eval(&net, &data[0].test)?];
    for (t, d) in data.iter().enumerate().skip(1) {
        let spec = PhaseSpec {
            name: "baseline_adapt",
            domain: t,
            epochs: plan.epochs_train,
            learning_rate: plan.adapt_lr,
            forward_masks: None,
            weight_masks: None,
            train_biases: true,
            train_classifier: false,
        };
        train_phase(&mut net, &d.train.inputs, None, &spec, plan, config.seed, &mut log)?;
        after.push(eval(&net, &d.test)?);
    }
    let end = data.iter().map(|d| eval(&net, &d.test)).collect::<Result<Vec<_>>>()?;
    Ok(BaselineResult {
        accuracy_after: after,
        accuracy_end: end,
        records: log,
    })
}
