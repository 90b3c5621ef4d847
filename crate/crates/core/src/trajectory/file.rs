//! `.svct` trajectory container.
//!
//! ```text
//! "SVCT" | version u32 | L u32 | T u32 | N u32 | D u32
//! | for l in 0..L, t in 0..T: N x D f64, row-major | crc32
//! ```
//!
//! Little-endian throughout; the CRC covers every preceding byte. The JSON
//! sidecar (`<file>.json`) holds the provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Provenance, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::io::{atomic_write, sidecar_path, write_json, Decoder, Encoder};
use crate::linalg::FeatureMatrix;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"SVCT";
pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 * 6;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    blocks: u32,
    steps: u32,
    tokens: u32,
    channels: u32,
    provenance: Provenance,
}

pub(crate) fn encode(rec: &TrajectoryRecord) -> Vec<u8> {
    let (n, d) = rec.feature_shape();
    let payload = rec.num_blocks() * rec.num_steps() * n * d * 8;
    let mut enc = Encoder::with_capacity(HEADER_LEN + payload + 4);
    enc.bytes(TRAJECTORY_MAGIC);
    enc.u32(TRAJECTORY_FORMAT_VERSION);
    enc.u32(rec.num_blocks() as u32);
    enc.u32(rec.num_steps() as u32);
    enc.u32(n as u32);
    enc.u32(d as u32);
    for block in rec.blocks() {
        for f in block {
            for x in f.row_major_iter() {
                enc.f64(x);
            }
        }
    }
    enc.finish()
}

pub(crate) fn decode(
    path: &Path,
    bytes: &[u8],
    provenance: Provenance,
) -> Result<TrajectoryRecord> {
    let mut dec = Decoder::framed(path, bytes, TRAJECTORY_MAGIC, HEADER_LEN)?;
    let version = dec.u32()?;
    if version != TRAJECTORY_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: TRAJECTORY_FORMAT_VERSION,
        });
    }
    let l = dec.u32()? as usize;
    let t = dec.u32()? as usize;
    let n = dec.u32()? as usize;
    let d = dec.u32()? as usize;
    if l == 0 || t == 0 || n == 0 || d == 0 {
        return Err(Error::Invariant {
            path: path.to_path_buf(),
            reason: format!("empty dimension in header (L={l}, T={t}, N={n}, D={d})"),
        });
    }
    let per = n
        .checked_mul(d)
        .ok_or_else(|| dec.malformed("dimension overflow"))?;
    let expected = [l, t, 8]
        .iter()
        .try_fold(per, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| dec.malformed("dimension overflow"))?;
    if dec.remaining() != expected {
        return Err(dec.malformed(format!(
            "payload has {} bytes, header implies {expected}",
            dec.remaining()
        )));
    }
    let mut blocks = Vec::with_capacity(l);
    for _ in 0..l {
        let mut steps = Vec::with_capacity(t);
        for _ in 0..t {
            let data = dec.f64s(per)?;
            let f = FeatureMatrix::from_row_major(n, d, data).map_err(|e| Error::Invariant {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            steps.push(f);
        }
        blocks.push(steps);
    }
    dec.expect_end()?;
    TrajectoryRecord::new(blocks, provenance)
}

/// Writes the binary container and its provenance sidecar, each atomically.
pub fn save_trajectory(rec: &TrajectoryRecord, path: &Path) -> Result<()> {
    atomic_write(path, &encode(rec))?;
    let (n, d) = rec.feature_shape();
    write_json(
        &sidecar_path(path),
        &Sidecar {
            format_version: TRAJECTORY_FORMAT_VERSION,
            blocks: rec.num_blocks() as u32,
            steps: rec.num_steps() as u32,
            tokens: n as u32,
            channels: d as u32,
            provenance: rec.provenance.clone(),
        },
    )
}

/// Reads a record written by [`save_trajectory`]. Without a sidecar the
/// provenance is `Unknown`.
pub fn load_trajectory(path: &Path) -> Result<TrajectoryRecord> {
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
    let provenance = sidecar
        .as_ref()
        .map(|s| s.provenance.clone())
        .unwrap_or(Provenance::Unknown);
    let rec = decode(path, &bytes, provenance)?;
    if let Some(side) = sidecar {
        let (n, d) = rec.feature_shape();
        let header = (rec.num_blocks(), rec.num_steps(), n, d);
        let claimed = (
            side.blocks as usize,
            side.steps as usize,
            side.tokens as usize,
            side.channels as usize,
        );
        if header != claimed {
            return Err(Error::Malformed {
                path: side_path,
                reason: "sidecar dimensions disagree with binary header".into(),
            });
        }
    }
    Ok(rec)
}
