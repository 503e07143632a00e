//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header, then
//! the parameters as little-endian f64, optionally followed by the Adam
//! first and second moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::params::Params;
use super::ModelConfig;
use crate::codec::Vocabulary;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TOKPLNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    param_count: usize,
    optimizer_step: Option<u64>,
    params_hash: String,
    config_hash: String,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Params,
    pub vocab: Vocabulary,
    pub adam: Option<Adam>,
    /// Hash of the run configuration that produced these weights.
    pub config_hash: String,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    /// SHA-256 of the parameter payload.
    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }
}

pub fn params_hash(p: &Params) -> String {
    sha256_hex(&f64_bytes(&p.data))
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated checkpoint payload: {e}")))?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        model: ck.params.config.clone(),
        vocab: ck.vocab.clone(),
        param_count: ck.params.data.len(),
        optimizer_step: ck.adam.as_ref().map(|a| a.step),
        params_hash: ck.params_hash(),
        config_hash: ck.config_hash.clone(),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&f64_bytes(&ck.params.data))?;
    if let Some(a) = &ck.adam {
        w.write_all(&f64_bytes(&a.m))?;
        w.write_all(&f64_bytes(&a.v))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b)?;
    let len = u64::from_le_bytes(u64b) as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("checkpoint header of {len} bytes")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    h.model.check_vocab(&h.vocab)?;
    let data = read_f64s(&mut r, h.param_count)?;
    let params = Params::from_data(&h.model, data)?;
    let hash = params_hash(&params);
    if hash != h.params_hash {
        return Err(Error::Format(format!("parameter hash mismatch: header {}, payload {hash}", h.params_hash)));
    }
    let adam = match h.optimizer_step {
        Some(step) => Some(Adam { m: read_f64s(&mut r, h.param_count)?, v: read_f64s(&mut r, h.param_count)?, step }),
        None => None,
    };
    Ok(Checkpoint { params, vocab: h.vocab, adam, config_hash: h.config_hash, meta: h.meta })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), ck)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
