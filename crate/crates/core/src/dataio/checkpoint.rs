//! Versioned binary container for model parameters and optimizer state.
//!
//! Layout (little-endian):
//! `MAGIC | version u32 | hash (len u32 + utf8) | config json (len u32 + utf8)
//! | step u64 | dtype (len u32 + utf8) | params | has_velocity u8 [| velocity]
//! | sha256(previous bytes) | TRAILER`, where a parameter set is
//! `count u32` then per tensor `name | rank u32 | dims u64.. | values`.

use std::path::Path;

use seascn_tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEASCNCK";
pub const CHECKPOINT_TRAILER: &[u8; 8] = b"SEASCEND";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub params: ParamStore<T>,
    /// Momentum buffers, when saved mid-training.
    pub velocity: Option<ParamStore<T>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn store<T: Scalar>(&mut self, store: &ParamStore<T>) {
        self.u32(store.len() as u32);
        for (name, t) in store.iter() {
            self.str(name);
            self.u32(t.rank() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for &v in t.data() {
                if T::NAME == "f32" {
                    self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                } else {
                    self.0.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Corrupt(e.to_string()))
    }

    fn store<T: Scalar>(&mut self, dtype: &str) -> Result<ParamStore<T>> {
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Corrupt(format!("unknown dtype {other:?}"))),
        };
        let mut out = ParamStore::new();
        for _ in 0..self.u32()? {
            let name = self.str()?;
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let bytes = self.take(numel.checked_mul(width).ok_or_else(|| Error::Corrupt("tensor size".into()))?)?;
            let data: Vec<T> = bytes
                .chunks_exact(width)
                .map(|c| {
                    let v = if width == 4 {
                        f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().expect("8 bytes"))
                    };
                    T::from_f64(v).unwrap_or_else(T::nan)
                })
                .collect();
            out.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(out)
    }
}

pub fn checkpoint_save<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&ckpt.config.hash());
    w.str(&serde_json::to_string(&ckpt.config)?);
    w.u64(ckpt.step);
    w.str(T::NAME);
    w.store(&ckpt.params);
    match &ckpt.velocity {
        Some(v) => {
            w.0.push(1);
            w.store(v);
        }
        None => w.0.push(0),
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0.extend_from_slice(CHECKPOINT_TRAILER);
    super::write_atomic(path, &w.0)
}

/// Reads a checkpoint, converting values to `T` if it was saved with another
/// scalar type. With `expected`, the stored architecture hash must match.
pub fn checkpoint_load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint<T>> {
    let tail = CHECKPOINT_TRAILER.len() + 32;
    if bytes.len() < CHECKPOINT_MAGIC.len() + tail {
        return Err(Error::Truncated(format!("only {} bytes", bytes.len())));
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    if &bytes[bytes.len() - CHECKPOINT_TRAILER.len()..] != CHECKPOINT_TRAILER {
        return Err(Error::Truncated("end-of-file marker missing".into()));
    }
    let body = &bytes[..bytes.len() - tail];
    let digest = &bytes[bytes.len() - tail..bytes.len() - CHECKPOINT_TRAILER.len()];
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash = r.str()?;
    let config: ModelConfig = serde_json::from_str(&r.str()?)?;
    if config.hash() != hash {
        return Err(Error::Corrupt("embedded config does not match its hash".into()));
    }
    if let Some(exp) = expected {
        let want = exp.hash();
        if want != hash {
            return Err(Error::ConfigHash {
                found: hash,
                expected: want,
            });
        }
    }
    let step = r.u64()?;
    let dtype = r.str()?;
    let params = r.store(&dtype)?;
    let velocity = match r.u8()? {
        0 => None,
        1 => Some(r.store(&dtype)?),
        f => return Err(Error::Corrupt(format!("velocity flag {f}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} unexpected bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        step,
        params,
        velocity,
    })
}
