//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `EGMFCKPT`, little-endian `u64` header length, the
//! JSON header, then one raw little-endian `f64` block per parameter in
//! header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EGMFCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub params: Vec<ParamEntry>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    seed: u64,
    config_hash: Option<&str>,
) -> Result<()> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        seed,
        config_hash: config_hash.map(str::to_string),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| TensorError::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut store = ParamStore::new();
    let mut buf = [0u8; 8];
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)
                .map_err(|_| TensorError::Checkpoint(format!("truncated data for {}", entry.name)))?;
            data.push(f64::from_le_bytes(buf));
        }
        let value = Tensor::new(entry.shape.clone(), data)?;
        store.insert(entry.name.clone(), value, entry.frozen)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(TensorError::Checkpoint("trailing bytes after data".into()));
    }
    Ok((header, store))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, seed: u64, config_hash: Option<&str>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), store, seed, config_hash)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
