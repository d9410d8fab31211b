//! Checkpoint container (`VXC1`), little-endian:
//!
//! ```text
//! magic "VXC1"
//! [u8; 32]  SHA-256 of the canonical run configuration
//! u64 len, UTF-8 configuration text
//! u64 epochs completed, u64 iterations completed, u64 optimizer step
//! u32 parameter count, then per parameter:
//!   u32 len, UTF-8 name
//!   u32 rank, u32 extent per axis
//!   u64 len, f64 values        (parameter)
//!   u64 len, f64 values        (first moment)
//!   u64 len, f64 values        (second moment)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::data::io::{format_err, Reader};
use crate::encoder::ModelParameters;
use crate::error::{Error, Result};
use crate::loss_optim::AdamState;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXC1";

/// Upper bound on the scalars in one stored blob.
const MAX_BLOB: u64 = 1 << 28;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub iteration: u64,
    pub params: ModelParameters,
    pub adam: AdamState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, data: &[f64]) {
    put_u64(out, data.len() as u64);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn read_blob(r: &mut Reader, expected: usize, what: &str) -> Result<Vec<f64>> {
    let at = r.offset();
    let n = r.u64(what)?;
    if n > MAX_BLOB || n as usize != expected {
        return format_err(at, format!("{} holds {} values, expected {}", what, n, expected));
    }
    r.f64s(expected, what)
}

fn read_string(r: &mut Reader, len: usize, what: &str) -> Result<String> {
    let at = r.offset();
    let bytes = r.take(len, what)?;
    String::from_utf8(bytes.to_vec()).or_else(|_| format_err(at, format!("{} is not UTF-8", what)))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.config.hash());
        let text = self.config.canonical();
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.iteration);
        put_u64(&mut out, self.adam.step);
        put_u32(&mut out, self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len());
            for &e in t.shape() {
                put_u32(&mut out, e);
            }
            put_blob(&mut out, t.data());
            put_blob(&mut out, &self.adam.m[i]);
            put_blob(&mut out, &self.adam.v[i]);
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CHECKPOINT_MAGIC)?;
        let hash_at = r.offset();
        let stored: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
        let len_at = r.offset();
        let len = r.u64("config length")?;
        if len > buf.len() as u64 {
            return format_err(len_at, format!("config length {} exceeds file", len));
        }
        let text = read_string(&mut r, len as usize, "config text")?;
        let actual: [u8; 32] = Sha256::digest(text.as_bytes()).into();
        if actual != stored {
            return format_err(
                hash_at,
                format!("config hash {} does not match its text ({})", hex(&stored), hex(&actual)),
            );
        }
        let config = RunConfig::parse(&text)?;
        let epoch = r.u64("epoch")?;
        let iteration = r.u64("iteration")?;
        let step = r.u64("optimizer step")?;
        let count = r.u32("parameter count")? as usize;
        let mut params = ModelParameters::empty();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = read_string(&mut r, name_len, "parameter name")?;
            let rank_at = r.offset();
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return format_err(rank_at, format!("rank {} of '{}' is implausible", rank, name));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1u64, |a, &e| a.checked_mul(e as u64));
            let numel = match numel {
                Some(n) if n <= MAX_BLOB => n as usize,
                _ => return format_err(rank_at, format!("shape {:?} of '{}' too large", shape, name)),
            };
            let data = read_blob(&mut r, numel, "parameter values")?;
            params.insert(name, Tensor::new(shape, data)?);
            m.push(read_blob(&mut r, numel, "first moment")?);
            v.push(read_blob(&mut r, numel, "second moment")?);
        }
        r.finish()?;
        Ok(Self {
            config,
            epoch,
            iteration,
            params,
            adam: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Refuses a configuration whose hash differs from the stored one.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        if cfg.hash() != self.config.hash() {
            return Err(Error::Config(format!(
                "config hash {} does not match checkpoint hash {}",
                cfg.hash_hex(),
                self.config.hash_hex()
            )));
        }
        Ok(())
    }
}
