//! Per-domain copies of every batch-norm layer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::{BnLayerState, Network};

pub type BnState = Vec<BnLayerState>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnBank {
    entries: BTreeMap<usize, BnState>,
    source_init: Option<BnState>,
}

impl BnBank {
    pub fn new() -> Self {
        BnBank::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn entry(&self, domain: usize) -> Option<&BnState> {
        self.entries.get(&domain)
    }

    pub fn source_init(&self) -> Option<&BnState> {
        self.source_init.as_ref()
    }

    pub fn set_source_init(&mut self, state: BnState) {
        self.source_init = Some(state);
    }

    /// Stores a deep copy of the live batch-norm state. Entries are write-once.
    pub fn snapshot(&mut self, net: &Network, domain: usize) -> Result<()> {
        if self.entries.contains_key(&domain) {
            return Err(Error::Bank(format!("domain {domain} is already stored")));
        }
        self.entries.insert(domain, net.bn_state());
        Ok(())
    }

    pub fn insert(&mut self, domain: usize, state: BnState) -> Result<()> {
        if self.entries.contains_key(&domain) {
            return Err(Error::Bank(format!("domain {domain} is already stored")));
        }
        self.entries.insert(domain, state);
        Ok(())
    }

    pub fn restore(&self, net: &mut Network, domain: usize) -> Result<()> {
        let state = self
            .entries
            .get(&domain)
            .ok_or_else(|| Error::Bank(format!("no batch-norm entry for domain {domain}")))?;
        net.load_bn_state(state)
    }

    pub fn reset_to_source(&self, net: &mut Network) -> Result<()> {
        let state = self
            .source_init
            .as_ref()
            .ok_or_else(|| Error::Bank("source batch-norm state was never recorded".into()))?;
        net.load_bn_state(state)
    }

    /// Stable hash of every stored value, for immutability checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: f64| {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let states = self.entries.values().chain(self.source_init.iter());
        for state in states {
            for layer in state {
                for v in layer
                    .gamma
                    .iter()
                    .chain(&layer.beta)
                    .chain(&layer.running_mean)
                    .chain(&layer.running_var)
                {
                    feed(*v);
                }
            }
        }
        h
    }
}
