//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "FIDG-CK1"                      8 bytes
//! version u32
//! count   u32                              number of named arrays
//! count times:
//!     name_len u16, name utf-8 bytes
//!     rank     u8,  dims u32 * rank
//!     payload  f64 * prod(dims)
//! phase_len u16, phase utf-8 bytes         training phase tag
//! rng_state u64 * 4                        xoshiro256** state
//! step      u64
//! ```
//!
//! Writing the same state twice produces byte-identical files; that property
//! is load-bearing for the reproducibility guarantees and is tested.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FIDG-CK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    BadMagic,
    UnsupportedVersion(u32),
    Corrupt(String),
    MissingArray(String),
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::BadMagic => write!(f, "not a FIDG-CK1 checkpoint (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Corrupt(why) => write!(f, "corrupt checkpoint: {why}"),
            CheckpointError::MissingArray(name) => {
                write!(f, "checkpoint is missing array '{name}'")
            }
            CheckpointError::ShapeMismatch { name, expected, actual } => {
                write!(f, "array '{name}' has shape {actual:?}, expected {expected:?}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

/// Everything a run needs to resume: parameters (and optimizer moments),
/// the phase tag, the training RNG state, and the step counter.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub arrays: Vec<(String, Tensor)>,
    pub phase: String,
    pub rng_state: [u64; 4],
    pub step: u64,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingArray(name.to_string()))
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&ck.version.to_le_bytes())?;
    let count = u32::try_from(ck.arrays.len())
        .map_err(|_| CheckpointError::Corrupt("too many arrays".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, tensor) in &ck.arrays {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len())
            .map_err(|_| CheckpointError::Corrupt(format!("array name too long: {name}")))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name_bytes)?;
        let rank = u8::try_from(tensor.shape().len())
            .map_err(|_| CheckpointError::Corrupt(format!("rank too large for '{name}'")))?;
        w.write_all(&[rank])?;
        for &dim in tensor.shape() {
            let d = u32::try_from(dim)
                .map_err(|_| CheckpointError::Corrupt(format!("dim too large in '{name}'")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(tensor.numel() * 8);
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&payload)?;
    }
    let phase_bytes = ck.phase.as_bytes();
    let phase_len = u16::try_from(phase_bytes.len())
        .map_err(|_| CheckpointError::Corrupt("phase tag too long".into()))?;
    w.write_all(&phase_len.to_le_bytes())?;
    w.write_all(phase_bytes)?;
    for word in ck.rng_state {
        w.write_all(&word.to_le_bytes())?;
    }
    w.write_all(&ck.step.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("array name is not utf-8".into()))?;
        let mut rank_byte = [0u8; 1];
        r.read_exact(&mut rank_byte)?;
        let rank = rank_byte[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > (1 << 30) {
            return Err(CheckpointError::Corrupt(format!(
                "array '{name}' claims {numel} elements"
            )));
        }
        let mut payload = vec![0u8; numel * 8];
        r.read_exact(&mut payload)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(&shape, data)
            .map_err(|e| CheckpointError::Corrupt(format!("array '{name}': {e}")))?;
        arrays.push((name, tensor));
    }
    let phase_len = read_u16(&mut r)? as usize;
    let mut phase_bytes = vec![0u8; phase_len];
    r.read_exact(&mut phase_bytes)?;
    let phase = String::from_utf8(phase_bytes)
        .map_err(|_| CheckpointError::Corrupt("phase tag is not utf-8".into()))?;
    let mut rng_state = [0u64; 4];
    for word in &mut rng_state {
        *word = read_u64(&mut r)?;
    }
    let step = read_u64(&mut r)?;
    // Anything after the step counter is unexpected.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after step counter".into()));
    }
    Ok(Checkpoint {
        version,
        arrays,
        phase,
        rng_state,
        step,
    })
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
