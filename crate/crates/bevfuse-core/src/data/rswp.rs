//! Binary radar-sweep file: a fixed 20-byte header followed by one 16-byte
//! record per detection, little-endian throughout.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "RSWP"
//!      4     2  version (u16, currently 1)
//!      6     2  reserved (written 0, ignored on read)
//!      8     8  timestamp_us (u64)
//!     16     4  count (u32)
//!     20  16·N  records: x, y, rcs, v_d (f32 each)
//! ```
//!
//! The file carries no ego pose — poses travel in the sample's `meta.json`
//! — so [`read_sweep`] returns the identity pose and callers overwrite it.

use std::io::{Read, Write};
use std::path::Path;

use crate::radar::{EgoPose, RadarReturn, RadarSweep};

use super::{DataError, Result};

pub const RSWP_MAGIC: [u8; 4] = *b"RSWP";
pub const RSWP_VERSION: u16 = 1;
pub const RSWP_HEADER_LEN: usize = 20;
pub const RSWP_RECORD_LEN: usize = 16;

/// Serialize a sweep. The pose is intentionally not stored (see module doc).
pub fn write_sweep(sweep: &RadarSweep, path: &Path) -> Result<()> {
    let bytes = encode_sweep(sweep)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse a sweep file; the returned pose is [`EgoPose::IDENTITY`].
pub fn read_sweep(path: &Path) -> Result<RadarSweep> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_sweep(&bytes)
}

pub(crate) fn encode_sweep(sweep: &RadarSweep) -> Result<Vec<u8>> {
    let count = u32::try_from(sweep.points.len())
        .map_err(|_| DataError::BadConfig(format!("{} records overflow u32", sweep.points.len())))?;
    let mut out = Vec::with_capacity(RSWP_HEADER_LEN + sweep.points.len() * RSWP_RECORD_LEN);
    out.extend_from_slice(&RSWP_MAGIC);
    out.extend_from_slice(&RSWP_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&sweep.timestamp_us.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (index, p) in sweep.points.iter().enumerate() {
        for (field, v) in [("x", p.x), ("y", p.y), ("rcs", p.rcs), ("v_d", p.v_d)] {
            let v32 = v as f32;
            if !v32.is_finite() {
                return Err(DataError::NonFiniteRecord { field, index });
            }
            out.extend_from_slice(&v32.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode_sweep(bytes: &[u8]) -> Result<RadarSweep> {
    if bytes.len() < RSWP_HEADER_LEN {
        return Err(DataError::LengthMismatch {
            expected: RSWP_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != RSWP_MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != RSWP_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let timestamp_us = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let count = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = RSWP_HEADER_LEN as u64 + count as u64 * RSWP_RECORD_LEN as u64;
    if bytes.len() as u64 != expected {
        return Err(DataError::LengthMismatch { expected, actual: bytes.len() as u64 });
    }

    let mut points = Vec::with_capacity(count as usize);
    for index in 0..count as usize {
        let base = RSWP_HEADER_LEN + index * RSWP_RECORD_LEN;
        let field = |k: usize| {
            f32::from_le_bytes(bytes[base + 4 * k..base + 4 * k + 4].try_into().unwrap()) as f64
        };
        let p = RadarReturn { x: field(0), y: field(1), rcs: field(2), v_d: field(3) };
        for (name, v) in [("x", p.x), ("y", p.y), ("rcs", p.rcs), ("v_d", p.v_d)] {
            if !v.is_finite() {
                return Err(DataError::NonFiniteRecord { field: name, index });
            }
        }
        points.push(p);
    }
    Ok(RadarSweep { timestamp_us, pose: EgoPose::IDENTITY, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sweep(n: usize, seed: u64) -> RadarSweep {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RadarSweep {
            timestamp_us: rng.gen(),
            pose: EgoPose::IDENTITY,
            points: (0..n)
                .map(|_| RadarReturn {
                    // f32-representable so the round trip is bit-exact
                    x: rng.gen::<f32>() as f64 * 50.0f32 as f64,
                    y: (rng.gen::<f32>() * -40.0) as f64,
                    rcs: (rng.gen::<f32>() * 30.0 - 10.0) as f64,
                    v_d: (rng.gen::<f32>() * 16.0 - 8.0) as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rswp");
        let s = sweep(257, 7);
        write_sweep(&s, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), RSWP_HEADER_LEN + 257 * RSWP_RECORD_LEN);
        let back = read_sweep(&path).unwrap();
        assert_eq!(back.timestamp_us, s.timestamp_us);
        assert_eq!(back.points.len(), s.points.len());
        for (a, b) in back.points.iter().zip(&s.points) {
            assert_eq!((a.x as f32).to_bits(), (b.x as f32).to_bits());
            assert_eq!((a.v_d as f32).to_bits(), (b.v_d as f32).to_bits());
            assert_eq!((a.rcs as f32).to_bits(), (b.rcs as f32).to_bits());
        }
        // Writing the parsed sweep again reproduces the same bytes.
        let again = encode_sweep(&back).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn empty_sweep_is_twenty_bytes() {
        let s = sweep(0, 1);
        let bytes = encode_sweep(&s).unwrap();
        assert_eq!(bytes.len(), RSWP_HEADER_LEN);
        let back = decode_sweep(&bytes).unwrap();
        assert!(back.points.is_empty());
    }

    #[test]
    fn corrupted_inputs_yield_typed_errors() {
        let good = encode_sweep(&sweep(3, 2)).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_sweep(&bad_magic), Err(DataError::BadMagic { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(matches!(decode_sweep(&bad_version), Err(DataError::UnsupportedVersion(9))));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(decode_sweep(truncated), Err(DataError::LengthMismatch { .. })));

        let mut trailing = good.clone();
        trailing.push(0);
        assert!(matches!(decode_sweep(&trailing), Err(DataError::LengthMismatch { .. })));

        let mut nan_record = good.clone();
        nan_record[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_sweep(&nan_record), Err(DataError::NonFiniteRecord { field: "x", .. })));

        assert!(matches!(decode_sweep(&good[..7]), Err(DataError::LengthMismatch { .. })));
    }

    #[test]
    fn header_fuzz_never_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let good = encode_sweep(&sweep(5, 3)).unwrap();
        for _ in 0..1000 {
            let mut bytes = good.clone();
            let cut = rng.gen_range(0..=bytes.len());
            bytes.truncate(cut);
            for _ in 0..rng.gen_range(0..4) {
                if !bytes.is_empty() {
                    let i = rng.gen_range(0..bytes.len());
                    bytes[i] = rng.gen();
                }
            }
            let _ = decode_sweep(&bytes); // must return, never panic
        }
    }
}
