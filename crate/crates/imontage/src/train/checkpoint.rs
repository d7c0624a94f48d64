//! Binary checkpoints: parameters, optimizer moments, RNG position, and a
//! config digest, serialized little-endian and written atomically.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::model::Parameters;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"IMTG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON form of a config. Stored in checkpoints so
/// a file written under one architecture is refused by another.
pub fn config_digest<T: Serialize>(cfg: &T) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).into()
}

/// Enough state to rebuild a `ChaCha8Rng` exactly where it left off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Optimizer moments, stored at full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub t: u64,
    pub m: super::MomentTable,
    pub v: super::MomentTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: Parameters<f32>,
    pub rng: RngState,
    pub moments: Option<Moments>,
}

fn encode(cp: &Checkpoint, digest: &[u8; 32]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(digest);
    buf.extend_from_slice(&cp.step.to_le_bytes());
    buf.extend_from_slice(&cp.rng.seed.to_le_bytes());
    buf.extend_from_slice(&cp.rng.stream.to_le_bytes());
    buf.extend_from_slice(&cp.rng.word_pos.to_le_bytes());

    buf.extend_from_slice(&(cp.params.len() as u64).to_le_bytes());
    for (name, tensor) in &cp.params {
        encode_name(&mut buf, name);
        buf.extend_from_slice(&(tensor.shape().len() as u64).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    match &cp.moments {
        None => buf.push(0),
        Some(mom) => {
            buf.push(1);
            buf.extend_from_slice(&mom.t.to_le_bytes());
            encode_f64_table(&mut buf, &mom.m);
            encode_f64_table(&mut buf, &mom.v);
        }
    }
    buf
}

fn encode_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn encode_f64_table(buf: &mut Vec<u8>, table: &BTreeMap<String, Vec<f64>>) {
    buf.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for (name, vals) in table {
        encode_name(buf, name);
        buf.extend_from_slice(&(vals.len() as u64).to_le_bytes());
        for &v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    rest: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.rest.len() < n {
            return Err(TrainError::Truncated);
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    /// A length prefix that must still fit in the remaining bytes at
    /// `elem_size` each, so corrupt prefixes cannot trigger huge allocations.
    fn len_prefix(&mut self, elem_size: usize) -> Result<usize, TrainError> {
        let n = self.u64()? as usize;
        match n.checked_mul(elem_size) {
            Some(bytes) if bytes <= self.rest.len() => Ok(n),
            _ => Err(TrainError::Truncated),
        }
    }

    fn name(&mut self) -> Result<String, TrainError> {
        let n = self.len_prefix(1)?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| TrainError::Truncated)
    }

    fn f64_table(&mut self) -> Result<BTreeMap<String, Vec<f64>>, TrainError> {
        let count = self.len_prefix(1)?;
        let mut table = BTreeMap::new();
        for _ in 0..count {
            let name = self.name()?;
            let n = self.len_prefix(8)?;
            let raw = self.take(n * 8)?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(name, vals);
        }
        Ok(table)
    }
}

fn decode(bytes: &[u8], expected_digest: &[u8; 32]) -> Result<Checkpoint, TrainError> {
    let mut cur = Cursor { rest: bytes };
    if cur.take(4)? != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            got: version,
            want: CHECKPOINT_VERSION,
        });
    }
    if cur.take(32)? != expected_digest {
        return Err(TrainError::DigestMismatch);
    }
    let step = cur.u64()?;
    let rng = RngState {
        seed: cur.u64()?,
        stream: cur.u64()?,
        word_pos: cur.u128()?,
    };

    let count = cur.len_prefix(1)?;
    let mut params = Parameters::new();
    for _ in 0..count {
        let name = cur.name()?;
        let ndim = cur.len_prefix(8)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(TrainError::Truncated)?;
        let raw = cur.take(numel.checked_mul(4).ok_or(TrainError::Truncated)?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data));
    }

    let moments = match cur.take(1)?[0] {
        0 => None,
        _ => Some(Moments {
            t: cur.u64()?,
            m: cur.f64_table()?,
            v: cur.f64_table()?,
        }),
    };

    if !cur.rest.is_empty() {
        return Err(TrainError::TrailingBytes(cur.rest.len()));
    }
    Ok(Checkpoint {
        step,
        params,
        rng,
        moments,
    })
}

/// Serialize and write via a temporary file in the same directory followed
/// by a rename, so a crash mid-write never leaves a half-written checkpoint
/// at `path`.
pub fn save_checkpoint(
    path: &Path,
    cp: &Checkpoint,
    digest: &[u8; 32],
) -> Result<(), TrainError> {
    let bytes = encode(cp, digest);
    let io_err = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path, expected_digest: &[u8; 32]) -> Result<Checkpoint, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, expected_digest)
}
