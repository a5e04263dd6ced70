//! TOML run configuration. Unknown keys are rejected.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{make_domain_sequence, BaseSpec, DomainData, DomainSpec};
use crate::error::{Error, Result};
use crate::network::Architecture;
use crate::trainer::TrainPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub class_spread: f64,
    pub min_separation: f64,
    pub domains: Vec<DomainSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub architecture: Architecture,
    pub training: TrainPlan,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        let arch = Architecture::default();
        Config {
            seed: 7,
            training: TrainPlan::default(),
            data: default_suite(arch.input_dim),
            architecture: arch,
        }
    }
}

/// Four domains over 16 features: rotations of 0, π/6, π/3 and π/2 on the
/// leading feature pairs with growing scale drift and offsets.
pub fn default_suite(features: usize) -> DataConfig {
    let domains = (0..4)
        .map(|t| {
            let tf = t as f64;
            DomainSpec {
                domain_id: t,
                rotation: tf * PI / 6.0,
                rotated_pairs: features / 4,
                translation: (0..features)
                    .map(|j| if j % 4 == t % 4 { 1.5 * tf } else { 0.0 })
                    .collect(),
                scale: (0..features)
                    .map(|j| if j % 2 == 0 { 1.0 + 0.15 * tf } else { 1.0 - 0.1 * tf })
                    .collect(),
                noise_std: 1.0,
                n_train: 2000,
                n_test: 500,
                seed: 100 + t as u64,
            }
        })
        .collect();
    DataConfig {
        seed: 11,
        class_spread: 1.5,
        min_separation: 4.0,
        domains,
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn base_spec(&self) -> BaseSpec {
        BaseSpec {
            seed: self.data.seed,
            features: self.architecture.input_dim,
            num_classes: self.architecture.num_classes,
            class_spread: self.data.class_spread,
            min_separation: self.data.min_separation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        self.training.validate(self.data.domains.len())?;
        let base = self.base_spec();
        base.validate()?;
        for (t, d) in self.data.domains.iter().enumerate() {
            if d.domain_id != t {
                return Err(Error::Config(format!("domain at position {t} has id {}", d.domain_id)));
            }
            d.validate(&base)?;
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<DomainData>> {
        self.validate()?;
        make_domain_sequence(&self.base_spec(), &self.data.domains)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_matches_code_default() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(Config::from_toml(text).unwrap(), Config::default());
    }

    #[test]
    fn toml_roundtrip() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut text = Config::default().to_toml().unwrap();
        text = text.replace("[training]\n", "[training]\nlearning_rat = 0.1\n");
        assert!(matches!(Config::from_toml(&text), Err(Error::Config(_))));
        let text = format!("sed = 3\n{}", Config::default().to_toml().unwrap());
        assert!(matches!(Config::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut c = Config::default();
        c.data.domains[1].translation.pop();
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.data.domains.swap(0, 1);
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.training.keep_fractions = vec![0.5, 0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
    }
}
