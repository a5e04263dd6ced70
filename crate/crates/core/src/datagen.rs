//! Synthetic multi-domain classification data.
//!
//! Every domain shares one set of class-conditional Gaussian clusters in a
//! base space; a domain is the base distribution pushed through
//! scale → rotate (leading feature pairs) → translate. Labels are preserved.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DATA_MAGIC: &[u8; 8] = b"PACDADAT";
pub const DATA_FORMAT_VERSION: u32 = 1;

/// Shared label structure of a suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    pub seed: u64,
    pub features: usize,
    pub num_classes: usize,
    /// Standard deviation of class-mean coordinates.
    pub class_spread: f64,
    /// Minimum pairwise distance between class means.
    pub min_separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Radians, applied to each of the leading `rotated_pairs` feature pairs.
    pub rotation: f64,
    pub rotated_pairs: usize,
    pub translation: Vec<f64>,
    pub scale: Vec<f64>,
    pub noise_std: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn identity(domain_id: usize, features: usize, noise_std: f64, n_train: usize, n_test: usize, seed: u64) -> Self {
        DomainSpec {
            domain_id,
            rotation: 0.0,
            rotated_pairs: 0,
            translation: vec![0.0; features],
            scale: vec![1.0; features],
            noise_std,
            n_train,
            n_test,
            seed,
        }
    }

    pub fn validate(&self, base: &BaseSpec) -> Result<()> {
        let d = base.features;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(format!("domain {} has an empty split", self.domain_id)));
        }
        if self.translation.len() != d || self.scale.len() != d {
            return Err(Error::Config(format!(
                "domain {} transform vectors must have {d} entries",
                self.domain_id
            )));
        }
        if 2 * self.rotated_pairs > d {
            return Err(Error::Config(format!("domain {} rotates more pairs than exist", self.domain_id)));
        }
        if !(self.noise_std >= 0.0) || self.scale.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::Config(format!("domain {} has a degenerate transform", self.domain_id)));
        }
        if base.min_separation < 4.0 * self.noise_std {
            return Err(Error::Config(format!(
                "class separation {} is below 4·noise_std for domain {}",
                base.min_separation, self.domain_id
            )));
        }
        Ok(())
    }

    /// Maps a base-space point into this domain, in place.
    pub fn transform(&self, x: &mut [f64]) {
        for (v, s) in x.iter_mut().zip(&self.scale) {
            *v *= s;
        }
        let (sin, cos) = self.rotation.sin_cos();
        for p in 0..self.rotated_pairs {
            let (a, b) = (x[2 * p], x[2 * p + 1]);
            x[2 * p] = cos * a - sin * b;
            x[2 * p + 1] = sin * a + cos * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Inputs with labels; `domain_id` is only ever read by evaluation code.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainData {
    pub train: Split,
    pub test: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub domain_id: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One shuffled pass over the split in batches of `batch_size` (the last
    /// batch may be smaller).
    pub fn epoch<R: Rng>(&self, batch_size: usize, rng: &mut R) -> EpochIter<'_> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        EpochIter {
            split: self,
            order,
            pos: 0,
            batch_size: batch_size.max(1),
        }
    }

    /// Consecutive unshuffled batches; used for evaluation.
    pub fn chunks(&self, batch_size: usize) -> EpochIter<'_> {
        EpochIter {
            split: self,
            order: (0..self.len()).collect(),
            pos: 0,
            batch_size: batch_size.max(1),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (n, d) = self.inputs.dims2();
        let mut out = Vec::with_capacity(32 + n * d * 8 + n * 4);
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.domain_id as u32).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        for j in 0..d {
            for i in 0..n {
                out.extend_from_slice(&self.inputs.at(i, j).to_le_bytes());
            }
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Split> {
        let bytes = fs::read(path)?;
        Split::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Split> {
        let header = 8 + 4 + 4 + 8 + 8;
        if bytes.len() < header {
            return Err(Error::Truncated("data file header".into()));
        }
        if &bytes[..8] != DATA_MAGIC {
            return Err(Error::Format("not a data file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != DATA_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATA_FORMAT_VERSION,
            });
        }
        let domain_id = u32_at(12) as usize;
        let n = u64_at(16) as usize;
        let d = u64_at(24) as usize;
        let body = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(8))
            .and_then(|b| b.checked_add(n * 4))
            .ok_or_else(|| Error::Format("data file dimensions overflow".into()))?;
        if bytes.len() < header + body {
            return Err(Error::Truncated(format!("data file needs {} bytes", header + body)));
        }
        if bytes.len() > header + body {
            return Err(Error::Format("trailing bytes in data file".into()));
        }
        let mut data = vec![0.0; n * d];
        for j in 0..d {
            for i in 0..n {
                let o = header + (j * n + i) * 8;
                data[i * d + j] = f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
            }
        }
        let lo = header + n * d * 8;
        let labels = (0..n).map(|i| u32_at(lo + i * 4) as usize).collect();
        Ok(Split {
            inputs: Tensor::matrix(n, d, data)?,
            labels,
            domain_id,
        })
    }
}

pub struct EpochIter<'a> {
    split: &'a Split,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for EpochIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            inputs: self.split.inputs.gather_rows(idx),
            labels: idx.iter().map(|&i| self.split.labels[i]).collect(),
            domain_id: self.split.domain_id,
        })
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(base, tag)
}

impl BaseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.num_classes == 0 {
            return Err(Error::Config("suite needs at least one feature and one class".into()));
        }
        if !(self.class_spread > 0.0) || !(self.min_separation >= 0.0) {
            return Err(Error::Config("class spread must be positive".into()));
        }
        Ok(())
    }

    /// Class means, drawn until all pairs are at least `min_separation` apart.
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xC1A55));
        for _ in 0..10_000 {
            let means: Vec<Vec<f64>> = (0..self.num_classes)
                .map(|_| {
                    (0..self.features)
                        .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); self.class_spread * z })
                        .collect()
                })
                .collect();
            if min_pairwise_distance(&means) >= self.min_separation {
                return Ok(means);
            }
        }
        Err(Error::Config(format!(
            "could not place {} class means {} apart",
            self.num_classes, self.min_separation
        )))
    }

    /// Untransformed samples for `spec`: labels cycle through the classes,
    /// train rows come first.
    pub fn base_samples(&self, spec: &DomainSpec) -> Result<(Vec<f64>, Vec<usize>)> {
        let means = self.class_means()?;
        let n = spec.n_train + spec.n_test;
        let d = self.features;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, spec.seed));
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = if i < spec.n_train { i } else { i - spec.n_train } % self.num_classes;
            for &m in &means[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.noise_std * z);
            }
            labels.push(y);
        }
        Ok((data, labels))
    }

    pub fn make_domain(&self, spec: &DomainSpec) -> Result<DomainData> {
        spec.validate(self)?;
        let (mut data, labels) = self.base_samples(spec)?;
        let d = self.features;
        for row in data.chunks_mut(d) {
            spec.transform(row);
        }
        let cut = spec.n_train * d;
        let test = data.split_off(cut);
        let test_labels = labels[spec.n_train..].to_vec();
        let train_labels = labels[..spec.n_train].to_vec();
        Ok(DomainData {
            train: Split {
                inputs: Tensor::matrix(spec.n_train, d, data)?,
                labels: train_labels,
                domain_id: spec.domain_id,
            },
            test: Split {
                inputs: Tensor::matrix(spec.n_test, d, test)?,
                labels: test_labels,
                domain_id: spec.domain_id,
            },
        })
    }
}

pub fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

/// Generates every domain of a suite.
pub fn make_domain_sequence(base: &BaseSpec, specs: &[DomainSpec]) -> Result<Vec<DomainData>> {
    if specs.is_empty() {
        return Err(Error::Config("a suite needs at least one domain".into()));
    }
    specs.iter().map(|s| base.make_domain(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn base() -> BaseSpec {
        BaseSpec {
            seed: 5,
            features: 6,
            num_classes: 4,
            class_spread: 2.0,
            min_separation: 4.0,
        }
    }

    fn spec(rotation: f64) -> DomainSpec {
        DomainSpec {
            rotation,
            rotated_pairs: 1,
            ..DomainSpec::identity(1, 6, 0.3, 40, 12, 77)
        }
    }

    #[test]
    fn identity_domain_is_base_distribution() {
        let s = DomainSpec::identity(0, 6, 0.3, 40, 12, 77);
        let data = base().make_domain(&s).unwrap();
        let (raw, labels) = base().base_samples(&s).unwrap();
        assert_eq!(data.train.inputs.data(), &raw[..40 * 6]);
        assert_eq!(data.test.inputs.data(), &raw[40 * 6..]);
        assert_eq!(data.train.labels, labels[..40]);
    }

    #[test]
    fn half_turn_negates_rotation_plane() {
        let a = base().make_domain(&spec(0.0)).unwrap();
        let b = base().make_domain(&spec(PI)).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        for i in 0..a.train.len() {
            let (ra, rb) = (a.train.inputs.row(i), b.train.inputs.row(i));
            assert!((ra[0] + rb[0]).abs() < 1e-12 && (ra[1] + rb[1]).abs() < 1e-12);
            assert_eq!(&ra[2..], &rb[2..]);
        }
    }

    #[test]
    fn nearest_class_mean_oracle_separates_classes() {
        let b = BaseSpec {
            seed: 1,
            features: 16,
            num_classes: 8,
            class_spread: 2.0,
            min_separation: 4.0,
        };
        let s = DomainSpec::identity(0, 16, 0.3, 2000, 500, 3);
        let data = b.make_domain(&s).unwrap();
        let means = b.class_means().unwrap();
        assert!(min_pairwise_distance(&means) >= 4.0);
        let correct = (0..data.test.len())
            .filter(|&i| {
                let x = data.test.inputs.row(i);
                let best = (0..means.len())
                    .min_by(|&p, &q| {
                        let dp: f64 = x.iter().zip(&means[p]).map(|(a, m)| (a - m).powi(2)).sum();
                        let dq: f64 = x.iter().zip(&means[q]).map(|(a, m)| (a - m).powi(2)).sum();
                        dp.partial_cmp(&dq).unwrap()
                    })
                    .unwrap();
                best == data.test.labels[i]
            })
            .count();
        assert!(correct as f64 / data.test.len() as f64 >= 0.99);
    }

    #[test]
    fn degenerate_specs_rejected() {
        let mut s = spec(0.0);
        s.n_train = 0;
        assert!(matches!(base().make_domain(&s), Err(Error::Config(_))));
        let mut b = base();
        b.num_classes = 0;
        assert!(matches!(b.make_domain(&spec(0.0)), Err(Error::Config(_))));
        let mut s = spec(0.0);
        s.noise_std = 2.0;
        assert!(matches!(base().make_domain(&s), Err(Error::Config(_))));
        assert!(make_domain_sequence(&base(), &[]).is_err());
    }

    #[test]
    fn epoch_covers_each_sample_once_and_is_deterministic() {
        let data = base().make_domain(&spec(0.3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches: Vec<Batch> = data.train.epoch(16, &mut rng).collect();
        assert_eq!(batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![16, 16, 8]);
        let mut seen: Vec<Vec<u64>> = batches
            .iter()
            .flat_map(|b| (0..b.labels.len()).map(|i| b.inputs.row(i).iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
            .collect();
        seen.sort();
        let mut all: Vec<Vec<u64>> = (0..data.train.len())
            .map(|i| data.train.inputs.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        all.sort();
        assert_eq!(seen, all);

        let mut counts = [0usize; 4];
        batches.iter().flat_map(|b| &b.labels).for_each(|&y| counts[y] += 1);
        let mut expected = [0usize; 4];
        data.train.labels.iter().for_each(|&y| expected[y] += 1);
        assert_eq!(counts, expected);

        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let again: Vec<Batch> = data.train.epoch(16, &mut rng2).collect();
        assert_eq!(batches, again);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(base().make_domain(&spec(0.4)).unwrap(), base().make_domain(&spec(0.4)).unwrap());
    }

    #[test]
    fn columnar_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let data = base().make_domain(&spec(0.2)).unwrap();
        data.test.write(&path).unwrap();
        assert_eq!(Split::read(&path).unwrap(), data.test);
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(Split::decode(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
        assert!(matches!(Split::decode(&bytes[..10]), Err(Error::Truncated(_))));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(Split::decode(&bad), Err(Error::VersionMismatch { .. })));
    }
}
