//! Inference without a domain label.
//!
//! For each stored domain the batch is pushed through the first layer under
//! that domain's mask, and the per-feature batch mean and variance entering
//! the first batch norm are compared with that domain's running statistics.
//! The domain with the smallest squared deviation wins.
//!
//! Routing needs at least two samples per batch; mixed-domain batches are
//! routed as a whole.

use serde::{Deserialize, Serialize};

use crate::bn_bank::BnBank;
use crate::error::{Error, Result};
use crate::mask_ledger::MaskLedger;
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub chosen_domain: usize,
    /// `(domain, score)` for every candidate, in domain order.
    pub bnsd_scores: Vec<(usize, f64)>,
    pub predictions: Vec<usize>,
    #[serde(skip)]
    pub logits: Option<Tensor>,
}

/// Per-feature mean and unbiased variance over the batch axis.
pub fn batch_stats(acts: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = acts.dims2();
    if n < 2 {
        return Err(Error::contract(format!("batch statistics need at least 2 samples, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(acts.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(acts.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    Ok((mean, var))
}

/// Squared deviation of the batch's first-BN input statistics from the
/// running statistics stored for `domain`. Reads only.
pub fn bnsd(x: &Tensor, domain: usize, net: &Network, ledger: &MaskLedger, bank: &BnBank) -> Result<f64> {
    let entry = bank
        .entry(domain)
        .ok_or_else(|| Error::Bank(format!("no batch-norm entry for domain {domain}")))?;
    let masks = ledger
        .mask(domain)
        .ok_or_else(|| Error::Ledger(format!("no mask for domain {domain}")))?;
    let acts = net.first_bn_input(x, Some(masks))?;
    let (mean, var) = batch_stats(&acts)?;
    let first = entry
        .first()
        .ok_or_else(|| Error::Bank("stored entry has no batch-norm layers".into()))?;
    Ok(deviation(&mean, &var, &first.running_mean, &first.running_var))
}

pub fn deviation(mean: &[f64], var: &[f64], running_mean: &[f64], running_var: &[f64]) -> f64 {
    let dm: f64 = mean.iter().zip(running_mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let dv: f64 = var.iter().zip(running_var).map(|(a, b)| (a - b) * (a - b)).sum();
    dm + dv
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Logits for `x` under `domain`'s mask and batch-norm entry. Leaves the
/// live batch norm restored to `domain`.
pub fn predict_with_domain_id(
    x: &Tensor,
    domain: usize,
    net: &mut Network,
    ledger: &MaskLedger,
    bank: &BnBank,
) -> Result<Tensor> {
    let masks = ledger
        .mask(domain)
        .ok_or_else(|| Error::Ledger(format!("no mask for domain {domain}")))?;
    bank.restore(net, domain)?;
    net.forward_eval(x, Some(masks))
}

/// Scores every stored domain and predicts with the best one.
pub fn route_batch(x: &Tensor, net: &mut Network, ledger: &MaskLedger, bank: &BnBank) -> Result<RoutingDecision> {
    let domains: Vec<usize> = bank.domains().collect();
    if domains.is_empty() {
        return Err(Error::Bank("no stored domains to route between".into()));
    }
    let mut scores = Vec::with_capacity(domains.len());
    for &d in &domains {
        scores.push((d, bnsd(x, d, net, ledger, bank)?));
    }
    let mut chosen = scores[0];
    for &s in &scores[1..] {
        if s.1 < chosen.1 {
            chosen = s;
        }
    }
    let logits = predict_with_domain_id(x, chosen.0, net, ledger, bank)?;
    Ok(RoutingDecision {
        chosen_domain: chosen.0,
        bnsd_scores: scores,
        predictions: argmax_rows(&logits),
        logits: Some(logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Architecture;
    use crate::tensor::Tape;
    use proptest::prelude::*;

    #[test]
    fn stats_examples() {
        let x = Tensor::from_rows(&[vec![3.0, -2.0], vec![3.0, -2.0], vec![3.0, -2.0]]).unwrap();
        let (m, v) = batch_stats(&x).unwrap();
        assert_eq!(m, vec![3.0, -2.0]);
        assert_eq!(v, vec![0.0, 0.0]);
        let x = Tensor::from_rows(&[vec![-1.0, -1.0], vec![1.0, 1.0]]).unwrap();
        let (m, v) = batch_stats(&x).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
        assert_eq!(v, vec![2.0, 2.0]);
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(batch_stats(&one), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn stats_match_textbook_formula(rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 3), 2..30)) {
            let x = Tensor::from_rows(&rows).unwrap();
            let (m, v) = batch_stats(&x).unwrap();
            let n = rows.len() as f64;
            for j in 0..3 {
                // sum-of-squares form, independent of the two-pass code above
                let s: f64 = rows.iter().map(|r| r[j]).sum();
                let s2: f64 = rows.iter().map(|r| r[j] * r[j]).sum();
                let mean = s / n;
                let var = (s2 - n * mean * mean) / (n - 1.0);
                prop_assert!((m[j] - mean).abs() < 1e-12 * (1.0 + mean.abs()));
                prop_assert!((v[j] - var).abs() < 1e-9 * (1.0 + var.abs()));
            }
        }
    }

    fn arch() -> Architecture {
        Architecture {
            input_dim: 3,
            hidden: vec![6],
            bottleneck_dim: 4,
            num_classes: 3,
            bn_momentum: 1.0,
            bn_epsilon: 1e-5,
        }
    }

    fn batch(offset: f64, scale: f64) -> Tensor {
        let data: Vec<f64> = (0..24).map(|i| scale * ((i as f64 * 0.71).sin() + offset)).collect();
        Tensor::matrix(8, 3, data).unwrap()
    }

    /// Two domains; with momentum 1 each stored entry holds exactly the
    /// statistics of the last batch it saw.
    fn setup() -> (Network, MaskLedger, BnBank, Tensor, Tensor) {
        let mut net = Network::init(&arch(), 3).unwrap();
        let mut ledger = MaskLedger::for_network(&net);
        let mut bank = BnBank::new();
        let (a, b) = (batch(0.0, 1.0), batch(2.5, 1.0));
        ledger.extend(&mut net, 0.5).unwrap();
        net.forward_train(&mut Tape::new(), &a, ledger.mask(0)).unwrap();
        bank.snapshot(&net, 0).unwrap();
        ledger.extend(&mut net, 0.5).unwrap();
        net.forward_train(&mut Tape::new(), &b, ledger.mask(1)).unwrap();
        bank.snapshot(&net, 1).unwrap();
        (net, ledger, bank, a, b)
    }

    #[test]
    fn exact_match_scores_zero_and_wins() {
        let (mut net, ledger, bank, a, b) = setup();
        assert!(bnsd(&b, 1, &net, &ledger, &bank).unwrap() < 1e-20);
        let d = route_batch(&b, &mut net, &ledger, &bank).unwrap();
        assert_eq!(d.chosen_domain, 1);
        let d = route_batch(&a, &mut net, &ledger, &bank).unwrap();
        assert_eq!(d.chosen_domain, 0);
        assert!(d.bnsd_scores[0].1 < 1e-20);
        assert!(d.bnsd_scores.iter().all(|s| s.1 >= 0.0 && s.1.is_finite()));
        assert_eq!(net.bn_state(), *bank.entry(0).unwrap());
    }

    #[test]
    fn single_mean_offset_gives_delta_squared() {
        let rm = vec![1.0, 2.0, 3.0];
        let rv = vec![0.5, 0.5, 0.5];
        let mut mean = rm.clone();
        mean[1] += 0.3;
        assert!((deviation(&mean, &rv, &rm, &rv) - 0.09).abs() < 1e-15);
    }

    #[test]
    fn single_domain_always_chosen() {
        let mut net = Network::init(&arch(), 3).unwrap();
        let mut ledger = MaskLedger::for_network(&net);
        let mut bank = BnBank::new();
        ledger.extend(&mut net, 1.0).unwrap();
        bank.snapshot(&net, 0).unwrap();
        for off in [-3.0, 0.0, 9.0] {
            assert_eq!(route_batch(&batch(off, 2.0), &mut net, &ledger, &bank).unwrap().chosen_domain, 0);
        }
    }

    #[test]
    fn scoring_is_pure() {
        let (net, ledger, bank, a, _) = setup();
        let (n0, b0) = (net.clone(), bank.checksum());
        for d in 0..2 {
            bnsd(&a, d, &net, &ledger, &bank).unwrap();
        }
        assert_eq!(net, n0);
        assert_eq!(bank.checksum(), b0);
    }

    #[test]
    fn scores_are_not_scale_invariant() {
        let (net, ledger, bank, a, _) = setup();
        let mut scaled = a.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= 1.7);
        for d in 0..2 {
            let s0 = bnsd(&a, d, &net, &ledger, &bank).unwrap();
            let s1 = bnsd(&scaled, d, &net, &ledger, &bank).unwrap();
            assert!((s0 - s1).abs() > 1e-6);
        }
    }

    #[test]
    fn oracle_prediction_matches_routing_when_correct() {
        let (mut net, ledger, bank, _, b) = setup();
        let routed = route_batch(&b, &mut net, &ledger, &bank).unwrap();
        let direct = predict_with_domain_id(&b, 1, &mut net, &ledger, &bank).unwrap();
        assert_eq!(routed.logits.unwrap(), direct);
    }

    #[test]
    fn unknown_domain_and_empty_bank() {
        let (mut net, ledger, bank, a, _) = setup();
        assert!(matches!(bnsd(&a, 5, &net, &ledger, &bank), Err(Error::Bank(_))));
        assert!(matches!(predict_with_domain_id(&a, 5, &mut net, &ledger, &bank), Err(Error::Ledger(_))));
        assert!(matches!(route_batch(&a, &mut net, &ledger, &BnBank::new()), Err(Error::Bank(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = Tensor::from_rows(&[vec![1.0, 3.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}
