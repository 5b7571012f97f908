//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"BFCK"
//! version u16            (currently 1)
//! repeated records until EOF:
//!   name_len u16, name [u8; name_len] (UTF-8)
//!   rank     u8
//!   dims     [u32; rank]
//!   payload  [f32; prod(dims)]
//! ```
//!
//! Payloads are always stored as `f32` regardless of the in-memory scalar
//! type; loading into an `f64` model widens the values back.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"BFCK";
pub const VERSION: u16 = 1;

/// Keep single records and whole files well under memory limits; a record
/// claiming more elements than this is treated as corrupt.
const MAX_ELEMENTS: u64 = 1 << 28;
const MAX_RANK: u8 = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected \"BFCK\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated checkpoint while reading {context}")]
    Truncated { context: &'static str },
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("record for {name:?} has implausible shape {dims:?}")]
    BadShape { name: String, dims: Vec<u32> },
    #[error("checkpoint is missing tensor {name:?}")]
    MissingTensor { name: String },
    #[error("checkpoint tensor {name:?} has shape {got:?}, model expects {expect:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expect: Vec<usize>,
    },
    #[error("checkpoint contains tensor {name:?} unknown to the model")]
    UnknownTensor { name: String },
    #[error("duplicate tensor {name:?} in checkpoint")]
    DuplicateTensor { name: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// A loaded record, still in storage precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// Write named tensors in declaration order.
pub fn save<S: Scalar, P: AsRef<Path>>(
    path: P,
    entries: &[(String, Tensor<S>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_records(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

/// Write the magic/version header and all records to any sink, so callers
/// can embed a weight block inside a larger container file.
pub fn write_records<S: Scalar, W: Write>(
    w: &mut W,
    entries: &[(String, Tensor<S>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        debug_assert!(bytes.len() <= u16::MAX as usize, "tensor name too long");
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        debug_assert!(shape.len() <= MAX_RANK as usize);
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data().iter() {
            let f = v.to_f32().unwrap_or(f32::NAN);
            w.write_all(&f.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { context }
        } else {
            CheckpointError::Io(e)
        }
    })
}

/// Read every record in the file.
pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    read_records(&mut r)
}

/// Read a magic/version header and all records until EOF from any source.
pub fn read_records<R: Read>(mut r: R) -> Result<Vec<Record>> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 2];
    read_exact_or(&mut r, &mut v, "version")?;
    let version = u16::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let mut records = Vec::new();
    loop {
        let mut len_buf = [0u8; 2];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;

        let mut rank_buf = [0u8; 1];
        read_exact_or(&mut r, &mut rank_buf, "rank")?;
        let rank = rank_buf[0];
        if rank == 0 || rank > MAX_RANK {
            return Err(CheckpointError::BadShape {
                name,
                dims: Vec::new(),
            });
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let mut d = [0u8; 4];
            read_exact_or(&mut r, &mut d, "dims")?;
            let d = u32::from_le_bytes(d);
            elements = elements.saturating_mul(d as u64);
            dims.push(d);
        }
        if dims.iter().any(|&d| d == 0) || elements > MAX_ELEMENTS {
            return Err(CheckpointError::BadShape { name, dims });
        }
        let mut values = vec![0f32; elements as usize];
        let mut chunk = [0u8; 4];
        for v in values.iter_mut() {
            read_exact_or(&mut r, &mut chunk, "payload")?;
            *v = f32::from_le_bytes(chunk);
        }
        records.push(Record {
            name,
            dims: dims.into_iter().map(|d| d as usize).collect(),
            values,
        });
    }
    Ok(records)
}

/// Restore records into a model's named tensors. Every model tensor must be
/// present with the exact shape, and the checkpoint must not contain
/// tensors the model does not know.
pub fn restore<S: Scalar>(
    records: Vec<Record>,
    entries: &[(String, Tensor<S>)],
) -> Result<()> {
    let mut by_name: HashMap<String, Record> = HashMap::new();
    for rec in records {
        let name = rec.name.clone();
        if by_name.insert(name.clone(), rec).is_some() {
            return Err(CheckpointError::DuplicateTensor { name });
        }
    }
    for (name, tensor) in entries {
        let rec = by_name
            .remove(name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if rec.dims != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                got: rec.dims,
                expect: tensor.shape().to_vec(),
            });
        }
        let widened: Vec<S> = rec.values.iter().map(|&v| S::from_f64_lossy(v as f64)).collect();
        tensor
            .load_data(&widened)
            .expect("shape checked before load");
    }
    if let Some(name) = by_name.into_keys().next() {
        return Err(CheckpointError::UnknownTensor { name });
    }
    Ok(())
}
