//! Single-file checkpoints.
//!
//! Layout: `"PACDACKP"`, `u32` version, `u64` manifest length, JSON
//! manifest, `u64` blob length, blob of little-endian `f64` tensors followed
//! by the packed mask ledger, and a SHA-256 of everything before it.
//! Writes go to a temporary sibling and are renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bn_bank::{BnBank, BnState};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::mask_ledger::MaskLedger;
use crate::network::{BnLayerState, Network};
use crate::trainer::PipelineState;

const MAGIC: &[u8; 8] = b"PACDACKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    domain_count: usize,
    bank_domains: Vec<usize>,
    has_source_init: bool,
    tensors: Vec<TensorEntry>,
    mask_offset: usize,
    mask_len: usize,
    accuracy_after: Vec<f64>,
    config: Config,
}

#[derive(Default)]
struct BlobWriter {
    blob: Vec<u8>,
    index: Vec<TensorEntry>,
}

impl BlobWriter {
    fn put(&mut self, name: String, shape: Vec<usize>, data: &[f64]) {
        let offset = self.blob.len();
        for v in data {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.index.push(TensorEntry {
            name,
            shape,
            offset,
            len: data.len() * 8,
        });
    }

    fn put_bn(&mut self, prefix: &str, state: &[BnLayerState]) {
        for (l, s) in state.iter().enumerate() {
            let n = s.gamma.len();
            self.put(format!("{prefix}/{l}/gamma"), vec![n], &s.gamma);
            self.put(format!("{prefix}/{l}/beta"), vec![n], &s.beta);
            self.put(format!("{prefix}/{l}/running_mean"), vec![n], &s.running_mean);
            self.put(format!("{prefix}/{l}/running_var"), vec![n], &s.running_var);
        }
    }
}

struct BlobReader<'a> {
    blob: &'a [u8],
    index: &'a [TensorEntry],
}

impl BlobReader<'_> {
    fn get(&self, name: &str, numel: usize) -> Result<Vec<f64>> {
        let e = self
            .index
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
        if e.len != numel * 8 || e.shape.iter().product::<usize>() != numel {
            return Err(Error::Format(format!("tensor {name} has the wrong size")));
        }
        let bytes = self
            .blob
            .get(e.offset..e.offset + e.len)
            .ok_or_else(|| Error::Format(format!("tensor {name} points outside the blob")))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn get_bn(&self, prefix: &str, template: &[BnLayerState]) -> Result<BnState> {
        template
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let n = t.gamma.len();
                Ok(BnLayerState {
                    gamma: self.get(&format!("{prefix}/{l}/gamma"), n)?,
                    beta: self.get(&format!("{prefix}/{l}/beta"), n)?,
                    running_mean: self.get(&format!("{prefix}/{l}/running_mean"), n)?,
                    running_var: self.get(&format!("{prefix}/{l}/running_var"), n)?,
                })
            })
            .collect()
    }
}

pub fn encode(state: &PipelineState, config: &Config) -> Result<Vec<u8>> {
    let mut w = BlobWriter::default();
    let net = &state.net;
    for id in net.param_ids() {
        let t = net.param(id);
        w.put(format!("param/{}", id.name()), t.shape().to_vec(), t.data());
    }
    w.put_bn("bn", &net.bn_state());
    let domains: Vec<usize> = state.bank.domains().collect();
    for &d in &domains {
        w.put_bn(&format!("bank/{d}"), state.bank.entry(d).expect("listed domain"));
    }
    if let Some(s) = state.bank.source_init() {
        w.put_bn("source_init", s);
    }
    let masks = state.ledger.pack();
    let mask_offset = w.blob.len();
    w.blob.extend_from_slice(&masks);
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        domain_count: state.ledger.domains(),
        bank_domains: domains,
        has_source_init: state.bank.source_init().is_some(),
        tensors: w.index,
        mask_offset,
        mask_len: masks.len(),
        accuracy_after: state.accuracy_after.clone(),
        config: config.clone(),
    };
    let manifest = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(28 + manifest.len() + w.blob.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(w.blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&w.blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize, what: &str) -> Result<usize> {
    let b = bytes
        .get(at..at + 8)
        .ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
    usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).map_err(|_| Error::Format(format!("{what} too large")))
}

pub fn decode(bytes: &[u8]) -> Result<(PipelineState, Config)> {
    if bytes.len() < 12 {
        return Err(Error::Truncated("checkpoint header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let manifest_len = read_u64(bytes, 12, "manifest length")?;
    let manifest_end = 20usize
        .checked_add(manifest_len)
        .ok_or_else(|| Error::Format("manifest length overflows".into()))?;
    let blob_len = read_u64(bytes, manifest_end, "blob length")?;
    let blob_start = manifest_end + 8;
    let end = blob_start
        .checked_add(blob_len)
        .and_then(|e| e.checked_add(DIGEST_LEN))
        .ok_or_else(|| Error::Format("blob length overflows".into()))?;
    if bytes.len() < end {
        return Err(Error::Truncated(format!("checkpoint needs {end} bytes, found {}", bytes.len())));
    }
    if bytes.len() > end {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let body = &bytes[..end - DIGEST_LEN];
    if Sha256::digest(body).as_slice() != &bytes[end - DIGEST_LEN..] {
        return Err(Error::Checksum("checkpoint digest does not match contents".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..manifest_end]).map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let blob = &bytes[blob_start..blob_start + blob_len];
    let reader = BlobReader {
        blob,
        index: &manifest.tensors,
    };
    let config = manifest.config;
    config.validate()?;

    let mut net = Network::init(&config.architecture, 0)?;
    for id in net.param_ids() {
        let numel = net.param(id).numel();
        let data = reader.get(&format!("param/{}", id.name()), numel)?;
        net.param_mut(id).data_mut().copy_from_slice(&data);
    }
    let template = net.bn_state();
    let live = reader.get_bn("bn", &template)?;
    net.load_bn_state(&live)?;

    let mut bank = BnBank::new();
    for &d in &manifest.bank_domains {
        bank.insert(d, reader.get_bn(&format!("bank/{d}"), &template)?)?;
    }
    if manifest.has_source_init {
        bank.set_source_init(reader.get_bn("source_init", &template)?);
    }
    let masks = blob
        .get(manifest.mask_offset..manifest.mask_offset + manifest.mask_len)
        .ok_or_else(|| Error::Format("mask blob points outside the file".into()))?;
    let ledger = MaskLedger::unpack(masks)?;
    if ledger.tensors() != net.prunable_tensors().as_slice() {
        return Err(Error::Format("mask ledger does not fit the architecture".into()));
    }
    if ledger.domains() != manifest.domain_count || manifest.accuracy_after.len() != ledger.domains() {
        return Err(Error::Format("domain counts disagree".into()));
    }
    Ok((
        PipelineState {
            net,
            ledger,
            bank,
            accuracy_after: manifest.accuracy_after,
        },
        config,
    ))
}

pub fn save_checkpoint(path: &Path, state: &PipelineState, config: &Config) -> Result<()> {
    let bytes = encode(state, config)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    {
        let mut f = fs::File::create(tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(PipelineState, Config)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Format(format!("no checkpoint at {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    decode(&bytes)
}
