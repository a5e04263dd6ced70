//! Accuracy, forgetting, cross-mask matrices and the pruning curve.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bn_bank::BnBank;
use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::mask_ledger::MaskLedger;
use crate::network::Network;
use crate::router::{argmax_rows, predict_with_domain_id};
use crate::tensor::Tensor;
use crate::trainer::{source_prune_finetune, TrainPlan};

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty batch"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let hits = argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `end − after`; negative means forgetting.
pub fn forgetting_delta(acc_end: f64, acc_after_training: f64) -> f64 {
    acc_end - acc_after_training
}

/// Rounds to one decimal place.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Test accuracy of `domain` under its own mask and batch-norm entry.
pub fn domain_accuracy(net: &mut Network, ledger: &MaskLedger, bank: &BnBank, domain: usize, split: &Split) -> Result<f64> {
    let logits = predict_with_domain_id(&split.inputs, domain, net, ledger, bank)?;
    accuracy(&logits, &split.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// `values[r][c]` in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != cols.len()) {
            return Err(Error::dim("accuracy matrix grid is incomplete"));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("accuracy outside [0, 1]"));
        }
        Ok(AccuracyMatrix { rows, cols, values })
    }

    /// True when every column's maximum sits on the diagonal.
    pub fn diagonal_dominant(&self) -> bool {
        (0..self.cols.len().min(self.rows.len())).all(|c| {
            let diag = self.values[c][c];
            self.values.iter().all(|row| row[c] <= diag)
        })
    }

    /// Percent table at 0.1 precision.
    pub fn to_table(&self, corner: &str) -> String {
        let width = self
            .rows
            .iter()
            .chain(&self.cols)
            .map(String::len)
            .chain([corner.len(), 5])
            .max()
            .unwrap_or(5);
        let mut out = format!("{corner:<width$}");
        for c in &self.cols {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            let _ = write!(out, "{r:<width$}");
            for v in row {
                let _ = write!(out, " {:>width$.1}", 100.0 * v);
            }
            out.push('\n');
        }
        out
    }
}

/// Accuracy of every (mask domain, data domain) pair.
pub fn cross_mask_matrix(net: &mut Network, ledger: &MaskLedger, bank: &BnBank, tests: &[Split]) -> Result<AccuracyMatrix> {
    let domains: Vec<usize> = bank.domains().collect();
    let mut values = Vec::with_capacity(domains.len());
    for &d in &domains {
        let row = tests
            .iter()
            .map(|s| domain_accuracy(net, ledger, bank, d, s))
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    AccuracyMatrix::new(
        domains.iter().map(|d| format!("mask {d}")).collect(),
        tests.iter().map(|s| format!("data {}", s.domain_id)).collect(),
        values,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPoint {
    pub fraction: f64,
    pub ante_finetune: f64,
    pub post_finetune: f64,
}

/// For each pruned fraction, L1-prunes a copy of the dense `net`, measures,
/// fine-tunes the survivors on `train` and measures again on `test`.
pub fn pruning_curve(
    net: &Network,
    train: &Split,
    test: &Split,
    fractions: &[f64],
    plan: &TrainPlan,
    seed: u64,
) -> Result<Vec<PruningPoint>> {
    fractions
        .iter()
        .map(|&f| {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Config(format!("pruning fraction {f} outside [0, 1)")));
            }
            let mut copy = net.clone();
            let mut ledger = MaskLedger::for_network(&copy);
            let mut scratch = Vec::new();
            // prune, measure, then fine-tune via the source routine
            let probe = {
                let mut l = ledger.clone();
                let mut c = copy.clone();
                let m = l.extend(&mut c, 1.0 - f)?;
                accuracy(&c.forward_eval(&test.inputs, Some(&m))?, &test.labels)?
            };
            source_prune_finetune(&mut copy, &mut ledger, train, 1.0 - f, plan, seed, &mut scratch)?;
            let post = accuracy(&copy.forward_eval(&test.inputs, ledger.mask(0))?, &test.labels)?;
            Ok(PruningPoint {
                fraction: f,
                ante_finetune: probe,
                post_finetune: post,
            })
        })
        .collect()
}

pub fn pruning_table(points: &[PruningPoint]) -> String {
    let mut out = String::from("pruned%  ante   post\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:>7.1} {:>5.1} {:>6.1}",
            100.0 * p.fraction,
            100.0 * p.ante_finetune,
            100.0 * p.post_finetune
        );
    }
    out
}
