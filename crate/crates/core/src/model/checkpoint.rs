//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "ATTNMOVE"
//! version    u32      currently 1
//! header     u32 length + UTF-8 JSON {"config": ModelConfig, "history_layers",
//!            "current_layers", "inter", "generation"}
//! count      u32      number of matrices
//! matrix*    u32 name length, name bytes, u64 rows, u64 cols,
//!            rows*cols f64 values in row-major order
//! ```
//!
//! Matrices appear in [`ModelParams::matrices`] order. Values are stored as
//! raw IEEE-754 bits, so a save/load round trip is bit-exact.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::attn::AttentionBlock;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ATTNMOVE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    history_layers: usize,
    current_layers: usize,
    inter: bool,
    generation: bool,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams) -> std::io::Result<()> {
    let header = Header {
        config: *params.config(),
        history_layers: params.history_stack.len(),
        current_layers: params.current_stack.len(),
        inter: params.inter_block.is_some(),
        generation: params.gen_block.is_some(),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    let matrices = params.matrices();
    w.write_all(&(matrices.len() as u32).to_le_bytes())?;
    for (name, m) in matrices {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(m.nrows() as u64).to_le_bytes())?;
        w.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| ck(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| ck(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, expected_name: &str) -> Result<Array2<f64>> {
    let len = read_u32(r)? as usize;
    if len > 1024 {
        return Err(ck("matrix name too long"));
    }
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(|e| ck(format!("truncated: {e}")))?;
    if name != expected_name.as_bytes() {
        return Err(ck(format!(
            "expected matrix `{expected_name}`, found `{}`",
            String::from_utf8_lossy(&name)
        )));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let n = rows.checked_mul(cols).filter(|&n| n <= 1 << 32).ok_or_else(|| ck("matrix too large"))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| ck(format!("truncated: {e}")))?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Array2::from_shape_vec((rows, cols), values).map_err(|e| ck(e.to_string()))
}

fn read_block<R: Read>(r: &mut R, prefix: &str, cfg: &ModelConfig) -> Result<AttentionBlock> {
    let wq = read_matrix(r, &format!("{prefix}.wq"))?;
    let wk = read_matrix(r, &format!("{prefix}.wk"))?;
    let wv = read_matrix(r, &format!("{prefix}.wv"))?;
    let wr = read_matrix(r, &format!("{prefix}.wr"))?;
    AttentionBlock::from_matrices(cfg.n_heads, cfg.head_dim, wq, wk, wv, wr)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ck("not a checkpoint (too short)"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ck("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    if len > 1 << 20 {
        return Err(ck("header too large"));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|e| ck(format!("truncated: {e}")))?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| ck(format!("bad header: {e}")))?;
    let cfg = header.config;
    cfg.validate()?;

    let count = read_u32(&mut r)? as usize;
    let expected = 1 + 4 * (header.history_layers + header.current_layers + header.inter as usize + header.generation as usize);
    if count != expected {
        return Err(ck(format!("expected {expected} matrices, found {count}")));
    }
    let embedding = EmbeddingTable::from_array(read_matrix(&mut r, "embedding")?)?;
    let history = (0..header.history_layers)
        .map(|i| read_block(&mut r, &format!("history.{i}"), &cfg))
        .collect::<Result<Vec<_>>>()?;
    let current = (0..header.current_layers)
        .map(|i| read_block(&mut r, &format!("current.{i}"), &cfg))
        .collect::<Result<Vec<_>>>()?;
    let inter = header.inter.then(|| read_block(&mut r, "inter", &cfg)).transpose()?;
    let generation = header.generation.then(|| read_block(&mut r, "generation", &cfg)).transpose()?;
    ModelParams::from_parts(cfg, embedding, history, current, inter, generation)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, params).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
