//! Per-epoch training records, stored as JSON Lines.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub phase: String,
    pub domain: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Training-batch accuracy; absent for unlabelled phases.
    pub accuracy: Option<f64>,
}

pub fn append_jsonl(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn records_roundtrip_losslessly(
            losses in proptest::collection::vec(-1e6f64..1e6, 1..20),
            acc in proptest::option::of(0.0f64..1.0),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.jsonl");
            let recs: Vec<EpochRecord> = losses
                .iter()
                .enumerate()
                .map(|(i, &loss)| EpochRecord { phase: "adapt".into(), domain: i % 3, epoch: i, loss, accuracy: acc })
                .collect();
            append_jsonl(&path, &recs[..1]).unwrap();
            append_jsonl(&path, &recs[1..]).unwrap();
            let back = read_jsonl(&path).unwrap();
            prop_assert_eq!(back.len(), recs.len());
            for (a, b) in back.iter().zip(&recs) {
                prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn malformed_line_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"phase\":1}\n").unwrap();
        assert!(matches!(read_jsonl(&path), Err(Error::Format(_))));
    }
}
