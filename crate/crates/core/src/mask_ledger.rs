//! Cumulative per-domain parameter masks.
//!
//! Domain `t` owns the weights in `M_t \ M_{t-1}`. Masks are nested
//! (`M_{t-1} ⊆ M_t`), chosen per prunable tensor by weight magnitude, and
//! frozen once the next domain starts.

use std::fmt;

use crate::error::{Error, Result};
use crate::network::Network;

const MASK_MAGIC: &[u8; 8] = b"PACDAMSK";
pub const MASK_FORMAT_VERSION: u32 = 1;
const BUDGET_SLACK: f64 = 1e-9;

#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct BitMask {
    bits: Vec<bool>,
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "BitMask[{s}]")
    }
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        BitMask { bits: vec![false; len] }
    }

    pub fn ones(len: usize) -> Self {
        BitMask { bits: vec![true; len] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        BitMask { bits }
    }

    pub fn from_u8s(bits: &[u8]) -> Self {
        BitMask {
            bits: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn complement(&self) -> BitMask {
        BitMask {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `self ∧ ¬other`
    pub fn difference(&self, other: &BitMask) -> BitMask {
        BitMask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }
}

/// LSB-first packing; trailing bits of the last byte are zero.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], len: usize) -> Vec<bool> {
    (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

fn target_count(n: usize, keep: f64) -> usize {
    // round half up, tolerant of accumulated float error in Σp
    ((n as f64 * keep) + 0.5 + BUDGET_SLACK).floor() as usize
}

/// Keeps every weight in `prior` plus the largest-magnitude free weights
/// until `round(n · cumulative_keep)` bits are set. Ties go to the lower
/// flat index.
pub fn select_l1_mask(weights: &[f64], prior: &BitMask, cumulative_keep: f64) -> Result<BitMask> {
    let n = weights.len();
    if prior.len() != n {
        return Err(Error::Ledger(format!("prior mask has {} bits for {} weights", prior.len(), n)));
    }
    if !(cumulative_keep > 0.0 && cumulative_keep <= 1.0 + BUDGET_SLACK) {
        return Err(Error::Ledger(format!("cumulative keep fraction {cumulative_keep} outside (0, 1]")));
    }
    let target = target_count(n, cumulative_keep).min(n);
    let claimed = prior.count_ones();
    if target < claimed {
        return Err(Error::Ledger(format!(
            "keep fraction {cumulative_keep} asks for {target} weights but {claimed} are already claimed"
        )));
    }
    let mut free: Vec<usize> = (0..n).filter(|&i| !prior.get(i)).collect();
    free.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .partial_cmp(&weights[a].abs())
            .expect("weights are finite")
            .then(a.cmp(&b))
    });
    let mut mask = prior.clone();
    for &i in free.iter().take(target - claimed) {
        mask.bits[i] = true;
    }
    Ok(mask)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Adapt,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunableTensor {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLedger {
    tensors: Vec<PrunableTensor>,
    masks: Vec<Vec<BitMask>>,
    keep_fractions: Vec<f64>,
    claimed_by: Vec<Vec<Option<u32>>>,
}

impl MaskLedger {
    pub fn new(tensors: Vec<PrunableTensor>) -> Self {
        let claimed_by = tensors.iter().map(|t| vec![None; t.len]).collect();
        MaskLedger {
            tensors,
            masks: Vec::new(),
            keep_fractions: Vec::new(),
            claimed_by,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        MaskLedger::new(net.prunable_tensors())
    }

    pub fn tensors(&self) -> &[PrunableTensor] {
        &self.tensors
    }

    /// Number of stored masks (domains processed so far).
    pub fn domains(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, t: usize) -> Option<&[BitMask]> {
        self.masks.get(t).map(Vec::as_slice)
    }

    pub fn keep_fractions(&self) -> &[f64] {
        &self.keep_fractions
    }

    pub fn cumulative_keep(&self) -> f64 {
        self.keep_fractions.iter().sum()
    }

    pub fn claimed_by(&self, tensor: usize) -> &[Option<u32>] {
        &self.claimed_by[tensor]
    }

    pub fn free_count(&self, tensor: usize) -> usize {
        self.claimed_by[tensor].iter().filter(|c| c.is_none()).count()
    }

    fn check_fraction(&self, p: f64) -> Result<()> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Ledger(format!("keep fraction {p} outside (0, 1]")));
        }
        if self.cumulative_keep() + p > 1.0 + BUDGET_SLACK {
            return Err(Error::Ledger(format!(
                "budget exhausted: {} already kept, {} requested",
                self.cumulative_keep(),
                p
            )));
        }
        Ok(())
    }

    /// Appends a mask for the next domain computed from raw weights, one
    /// slice per prunable tensor. Does not touch any network.
    pub fn push_from_weights(&mut self, weights: &[&[f64]], p: f64) -> Result<&[BitMask]> {
        self.check_fraction(p)?;
        if weights.len() != self.tensors.len() {
            return Err(Error::Ledger(format!(
                "{} weight tensors for {} prunable tensors",
                weights.len(),
                self.tensors.len()
            )));
        }
        let cumulative = self.cumulative_keep() + p;
        let t = self.masks.len();
        let mut new_masks = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            let prior = match self.masks.last() {
                Some(m) => m[i].clone(),
                None => BitMask::zeros(self.tensors[i].len),
            };
            new_masks.push(select_l1_mask(w, &prior, cumulative)?);
        }
        for (i, m) in new_masks.iter().enumerate() {
            for (j, &bit) in m.bits().iter().enumerate() {
                if bit && self.claimed_by[i][j].is_none() {
                    self.claimed_by[i][j] = Some(t as u32);
                }
            }
        }
        self.masks.push(new_masks);
        self.keep_fractions.push(p);
        Ok(&self.masks[t])
    }

    /// Prunes the live network to `M_t` for a new domain keeping `p` more of
    /// each prunable tensor. Weights outside `M_t` are set to exactly zero.
    pub fn extend(&mut self, net: &mut Network, p: f64) -> Result<Vec<BitMask>> {
        let weights: Vec<Vec<f64>> = net.prunable_weights().iter().map(|w| w.data().to_vec()).collect();
        let refs: Vec<&[f64]> = weights.iter().map(Vec::as_slice).collect();
        let masks = self.push_from_weights(&refs, p)?.to_vec();
        net.zero_outside(&masks)?;
        Ok(masks)
    }

    /// Per-tensor trainability for domain `t` in the given phase.
    ///
    /// Adapt trains everything outside `M_{t-1}`; fine-tune trains only the
    /// weights newly claimed by `t`.
    pub fn gradient_mask(&self, t: usize, phase: Phase) -> Result<Vec<BitMask>> {
        let prev = if t == 0 {
            None
        } else {
            Some(self.mask(t - 1).ok_or_else(|| {
                Error::Ledger(format!("domain {t} needs mask M_{} which does not exist", t - 1))
            })?)
        };
        match phase {
            Phase::Adapt => Ok(match prev {
                Some(prev) => prev.iter().map(BitMask::complement).collect(),
                None => self.tensors.iter().map(|t| BitMask::ones(t.len)).collect(),
            }),
            Phase::Finetune => {
                let cur = self
                    .mask(t)
                    .ok_or_else(|| Error::Ledger(format!("fine-tune of domain {t} before M_{t} exists")))?;
                Ok(match prev {
                    Some(prev) => cur.iter().zip(prev).map(|(c, p)| c.difference(p)).collect(),
                    None => cur.to_vec(),
                })
            }
        }
    }

    /// Checks nesting, per-tensor cardinality, budget and `claimed_by`
    /// consistency.
    pub fn check_invariants(&self) -> Result<()> {
        if self.cumulative_keep() > 1.0 + BUDGET_SLACK {
            return Err(Error::Ledger(format!("Σp = {} exceeds 1", self.cumulative_keep())));
        }
        let mut cumulative = 0.0;
        for (t, masks) in self.masks.iter().enumerate() {
            cumulative += self.keep_fractions[t];
            for (i, m) in masks.iter().enumerate() {
                let n = self.tensors[i].len;
                if m.len() != n {
                    return Err(Error::Ledger(format!("mask {t}/{i} has wrong length")));
                }
                if t > 0 && !self.masks[t - 1][i].is_subset_of(m) {
                    return Err(Error::Ledger(format!("M_{} ⊄ M_{t} on tensor {}", t - 1, self.tensors[i].name)));
                }
                let expected = n as f64 * cumulative;
                let count = m.count_ones() as f64;
                if (count - expected).abs() > 1.0 + 1e-9 && count != n as f64 {
                    return Err(Error::Ledger(format!(
                        "|M_{t}| = {count} on tensor {} but n·Σp = {expected}",
                        self.tensors[i].name
                    )));
                }
            }
        }
        for (i, owners) in self.claimed_by.iter().enumerate() {
            for (j, owner) in owners.iter().enumerate() {
                let first = self.masks.iter().position(|m| m[i].get(j)).map(|t| t as u32);
                if *owner != first {
                    return Err(Error::Ledger(format!(
                        "claimed_by of weight {j} in {} is {owner:?}, masks say {first:?}",
                        self.tensors[i].name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether every live weight outside `M_t` is exactly zero.
    pub fn pruned_weights_are_zero(&self, net: &Network, t: usize) -> bool {
        let Some(masks) = self.mask(t) else { return false };
        net.prunable_weights()
            .iter()
            .zip(masks)
            .all(|(w, m)| w.data().iter().zip(m.bits()).all(|(&v, &keep)| keep || v == 0.0))
    }

    /// Bit-packed serialization: manifest (tensor names and bit lengths,
    /// keep fractions) followed by each mask, tensors in layer order, LSB
    /// first and byte aligned per tensor.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.len as u64).to_le_bytes());
        }
        for p in &self.keep_fractions {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for masks in &self.masks {
            for m in masks {
                out.extend_from_slice(&pack_bits(m.bits()));
            }
        }
        out
    }

    pub fn unpack(bytes: &[u8]) -> Result<MaskLedger> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MASK_MAGIC {
            return Err(Error::Format("mask blob has wrong magic".into()));
        }
        let version = r.u32()?;
        if version != MASK_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: MASK_FORMAT_VERSION,
            });
        }
        let n_tensors = r.u32()? as usize;
        let n_domains = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let bits = r.u64()? as usize;
            tensors.push(PrunableTensor { name, len: bits });
        }
        let mut fractions = Vec::with_capacity(n_domains.min(1024));
        for _ in 0..n_domains {
            fractions.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        let mut ledger = MaskLedger::new(tensors);
        for (t, p) in fractions.into_iter().enumerate() {
            let mut masks = Vec::with_capacity(n_tensors);
            for i in 0..n_tensors {
                let n = ledger.tensors[i].len;
                let chunk = r.take(n.div_ceil(8))?;
                masks.push(BitMask::from_bits(unpack_bits(chunk, n)));
            }
            for (i, m) in masks.iter().enumerate() {
                for (j, &bit) in m.bits().iter().enumerate() {
                    if bit && ledger.claimed_by[i][j].is_none() {
                        ledger.claimed_by[i][j] = Some(t as u32);
                    }
                }
            }
            ledger.masks.push(masks);
            ledger.keep_fractions.push(p);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after mask blob", bytes.len() - r.pos)));
        }
        ledger
            .check_invariants()
            .map_err(|e| Error::Format(format!("mask blob violates ledger invariants: {e}")))?;
        Ok(ledger)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
