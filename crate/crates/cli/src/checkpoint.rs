//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "ADAMOLE\0"
//! version   u32
//! manifest  u64 length, then that many bytes of JSON
//! data      f64 values, each entry at its manifest offset (bytes from data start)
//! ```
//!
//! The manifest holds the experiment config and one `{name, shape, offset}`
//! entry per parameter, frozen ones included, in visiting order.

use std::path::Path;

use adamole::{Parameterized, ToyModel};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 8] = b"ADAMOLE\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub entries: Vec<Entry>,
}

pub fn encode(config: &ExperimentConfig, model: &ToyModel) -> CliResult<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    model.visit_params("", &mut |name, p| {
        entries.push(Entry {
            name: name.to_string(),
            shape: [p.value.rows(), p.value.cols()],
            offset: data.len() as u64,
        });
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = serde_json::to_vec(&Manifest {
        config: config.clone(),
        entries,
    })
    .map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + manifest.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Rebuilds the model from the stored config and overwrites every parameter.
pub fn decode(bytes: &[u8]) -> CliResult<(ExperimentConfig, ToyModel)> {
    let bad = |m: &str| CliError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CliError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let manifest_end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[20..manifest_end]).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let data = &bytes[manifest_end..];

    let mut model = ToyModel::new(manifest.config.model.clone())?;
    let mut expected = Vec::new();
    model.visit_params("", &mut |name, p| expected.push((name.to_string(), [p.value.rows(), p.value.cols()])));
    let listed: Vec<(String, [usize; 2])> = manifest.entries.iter().map(|e| (e.name.clone(), e.shape)).collect();
    if listed != expected {
        return Err(bad("parameter manifest does not match the configured model"));
    }
    let mut end = 0usize;
    for e in &manifest.entries {
        let start = e.offset as usize;
        let n = e.shape[0] * e.shape[1];
        end = end.max(start + 8 * n);
        if start + 8 * n > data.len() {
            return Err(CliError::Checkpoint(format!("data for {} runs past the end", e.name)));
        }
    }
    if end != data.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    let mut failure = None;
    model.visit_params_mut("", &mut |name, p| {
        let entry = manifest.entries.iter().find(|e| e.name == name).expect("names checked above");
        let start = entry.offset as usize;
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            let at = start + 8 * i;
            *v = f64::from_le_bytes(data[at..at + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                failure.get_or_insert_with(|| format!("non-finite value in {name}"));
            }
        }
    });
    if let Some(m) = failure {
        return Err(CliError::Checkpoint(m));
    }
    Ok((manifest.config, model))
}

pub fn save(path: &Path, config: &ExperimentConfig, model: &ToyModel) -> CliResult<()> {
    std::fs::write(path, encode(config, model)?).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<(ExperimentConfig, ToyModel)> {
    decode(&std::fs::read(path).map_err(|e| CliError::io(path, e))?)
}
