//! TMDE embedding files.
//!
//! Layout, all little-endian: magic `TMDE`, `u8` version, `u32 n`, `u32 dim`,
//! `u8 has_labels`, `u8 scaled`, `u16` reserved (zero), then `n·dim` `f32`
//! values row-major and, with labels, `n` `i32` labels.

use std::fs;
use std::path::Path;

use tmd_core::EmbeddingDataset;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMDE";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;

pub fn encode(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    let n = u32::try_from(ds.n()).map_err(|_| Error::Format("too many rows for TMDE".into()))?;
    let dim = u32::try_from(ds.dim()).map_err(|_| Error::Format("dimension too large for TMDE".into()))?;
    let labels = ds.labels();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.data().len() * 4 + labels.map_or(0, |l| l.len() * 4));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.push(u8::from(labels.is_some()));
    out.push(u8::from(ds.is_scaled()));
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in ds.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for y in labels.into_iter().flatten() {
        out.extend_from_slice(&y.to_le_bytes());
    }
    Ok(out)
}

fn flag(b: u8, what: &str) -> Result<bool> {
    match b {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(Error::Format(format!("{what} flag must be 0 or 1, found {b}"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingDataset> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a TMDE file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Version {
            kind: "TMDE",
            found: bytes[4],
            expected: VERSION,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("TMDE header truncated at {} bytes", bytes.len())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (n, dim) = (u32_at(5), u32_at(9));
    let has_labels = flag(bytes[13], "has_labels")?;
    let scaled = flag(bytes[14], "scaled")?;
    if bytes[15..17] != [0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    let values = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Corrupt("n·dim overflows".into()))?;
    let expected = values
        .checked_add(if has_labels { n } else { 0 })
        .and_then(|w| w.checked_mul(4))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Corrupt("declared size overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if bytes.len() < expected {
        let rows_present = if dim == 0 { 0 } else { payload.len() / 4 / dim };
        return Err(Error::Corrupt(format!(
            "payload truncated: header declares {n} rows of dim {dim} ({expected} bytes), file has {} bytes (~{} rows)",
            bytes.len(),
            rows_present.min(n)
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the declared payload",
            bytes.len() - expected
        )));
    }
    let data: Vec<f32> = payload[..values * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let labels = has_labels.then(|| {
        payload[values * 4..]
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    });
    if dim == 0 {
        return Err(Error::Format("TMDE dimension must be at least 1".into()));
    }
    Ok(EmbeddingDataset::new(dim, data, labels, scaled)?)
}

pub fn write(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<EmbeddingDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}
