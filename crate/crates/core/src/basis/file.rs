//! `.svdc` basis container.
//!
//! ```text
//! "SVDC" | version u32 | block_id i32 | step_id i32 (-1 = global) | D u32 | r u32
//! | tau f64 | k_default u32 | sigma: r x f64 | V: D x r f64, row-major | crc32
//! ```
//!
//! All fields little-endian. The CRC covers every preceding byte. A JSON
//! sidecar (`<file>.json`) repeats the metadata and carries `source_id`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{SpectralBasis, StepId};
use crate::error::{Error, Result};
use crate::io::{atomic_write, sidecar_path, write_json, Decoder, Encoder};

pub const BASIS_MAGIC: &[u8; 4] = b"SVDC";
pub const BASIS_FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 4 + 4 + 8 + 4;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Sidecar {
    format_version: u32,
    block_id: i32,
    step_id: i32,
    dim: u32,
    rank: u32,
    tau: f64,
    k_default: u32,
    source_id: String,
}

impl Sidecar {
    fn of(b: &SpectralBasis) -> Self {
        Sidecar {
            format_version: BASIS_FORMAT_VERSION,
            block_id: b.block_id,
            step_id: b.step_id.to_i32(),
            dim: b.dim() as u32,
            rank: b.rank() as u32,
            tau: b.tau,
            k_default: b.k_default as u32,
            source_id: b.source_id.clone(),
        }
    }
}

pub(crate) fn encode(b: &SpectralBasis) -> Vec<u8> {
    let (d, r) = (b.dim(), b.rank());
    let mut enc = Encoder::with_capacity(HEADER_LEN + 8 * r * (d + 1) + 4);
    enc.bytes(BASIS_MAGIC);
    enc.u32(BASIS_FORMAT_VERSION);
    enc.i32(b.block_id);
    enc.i32(b.step_id.to_i32());
    enc.u32(d as u32);
    enc.u32(r as u32);
    enc.f64(b.tau);
    enc.u32(b.k_default as u32);
    for &s in &b.sigma {
        enc.f64(s);
    }
    for i in 0..d {
        for j in 0..r {
            enc.f64(b.v[(i, j)]);
        }
    }
    enc.finish()
}

pub(crate) fn decode(path: &Path, bytes: &[u8], source_id: String) -> Result<SpectralBasis> {
    let mut dec = Decoder::framed(path, bytes, BASIS_MAGIC, HEADER_LEN)?;
    let version = dec.u32()?;
    if version != BASIS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: BASIS_FORMAT_VERSION,
        });
    }
    let block_id = dec.i32()?;
    let raw_step = dec.i32()?;
    let step_id = StepId::from_i32(raw_step)
        .ok_or_else(|| dec.malformed(format!("invalid step id {raw_step}")))?;
    let d = dec.u32()? as usize;
    let r = dec.u32()? as usize;
    let tau = dec.f64()?;
    let k_default = dec.u32()? as usize;

    let expected = r
        .checked_mul(d + 1)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| dec.malformed("dimension overflow"))?;
    if dec.remaining() != expected {
        return Err(dec.malformed(format!(
            "payload has {} bytes, header implies {expected}",
            dec.remaining()
        )));
    }
    let sigma = dec.f64s(r)?;
    let v_data = dec.f64s(d * r)?;
    dec.expect_end()?;

    let basis = SpectralBasis {
        v: DMatrix::from_row_slice(d, r, &v_data),
        sigma,
        block_id,
        step_id,
        source_id,
        tau,
        k_default,
    };
    basis.validate().map_err(|reason| Error::Invariant {
        path: path.to_path_buf(),
        reason,
    })?;
    Ok(basis)
}

/// Writes the binary container and its JSON sidecar, each atomically.
pub fn save_basis(basis: &SpectralBasis, path: &Path) -> Result<()> {
    atomic_write(path, &encode(basis))?;
    write_json(&sidecar_path(path), &Sidecar::of(basis))
}

/// Reads a basis written by [`save_basis`].
///
/// The binary container is authoritative. When the sidecar exists it must
/// agree with the binary header; it also supplies `source_id`, which is empty
/// if the sidecar is absent.
pub fn load_basis(path: &Path) -> Result<SpectralBasis> {
    let bytes = fs::read(path)?;
    let side_path = sidecar_path(path);
    let sidecar: Option<Sidecar> = match fs::read(&side_path) {
        Ok(text) => Some(serde_json::from_slice(&text).map_err(|e| Error::Malformed {
            path: side_path.clone(),
            reason: e.to_string(),
        })?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let source_id = sidecar
        .as_ref()
        .map(|s| s.source_id.clone())
        .unwrap_or_default();
    let basis = decode(path, &bytes, source_id)?;
    if let Some(side) = sidecar {
        if side != Sidecar::of(&basis) {
            return Err(Error::Malformed {
                path: side_path,
                reason: "sidecar metadata disagrees with binary header".into(),
            });
        }
    }
    Ok(basis)
}
