//! Binary grid files: `"TSDF"`, version, side, truncation, flags, values
//! (x-fastest f32), then an optional byte-per-voxel known mask. All integers
//! and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::TsdfGrid;
use crate::error::{format_err, io_err, validation, Error, Result};

const MAGIC: &[u8; 4] = b"TSDF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const FLAG_MASK: u32 = 1;

pub fn write_grid<W: Write>(grid: &TsdfGrid, mut w: W) -> std::io::Result<()> {
    let s = grid.resolution();
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.len() * 5);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(s as u32).to_le_bytes());
    buf.extend_from_slice(&grid.thresh().to_le_bytes());
    let flags = if grid.known_mask().is_some() {
        FLAG_MASK
    } else {
        0
    };
    buf.extend_from_slice(&flags.to_le_bytes());
    for v in grid.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(mask) = grid.known_mask() {
        buf.extend(mask.iter().map(|&k| k as u8));
    }
    w.write_all(&buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<TsdfGrid> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Io {
        path: "<reader>".into(),
        source: e,
    })?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<TsdfGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            "header",
            format!(
                "truncated: expected at least {HEADER_LEN} bytes, got {}",
                bytes.len()
            ),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(
            "magic",
            format!("expected \"TSDF\", found {:?}", &bytes[0..4]),
        ));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Version(format!(
            "grid file version {version}, supported {VERSION}"
        )));
    }
    let s = u32_at(bytes, 8) as usize;
    if s == 0 {
        return Err(validation("resolution field is 0"));
    }
    let thresh = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if !(thresh > 0.0 && thresh.is_finite()) {
        return Err(format_err(
            "thresh",
            format!("must be positive and finite, got {thresh}"),
        ));
    }
    let flags = u32_at(bytes, 16);
    if flags & !FLAG_MASK != 0 {
        return Err(format_err(
            "flags",
            format!("unknown bits set in {flags:#x}"),
        ));
    }
    let has_mask = flags & FLAG_MASK != 0;
    let n = s
        .checked_pow(3)
        .filter(|n| *n <= (u32::MAX as usize))
        .ok_or_else(|| format_err("resolution", format!("{s} is too large")))?;
    let expected = HEADER_LEN + 4 * n + if has_mask { n } else { 0 };
    if bytes.len() != expected {
        let what = if bytes.len() < expected {
            "truncated"
        } else {
            "trailing data"
        };
        return Err(format_err(
            "values",
            format!(
                "{what}: expected {expected} bytes for resolution {s}, got {}",
                bytes.len()
            ),
        ));
    }
    let body = &bytes[HEADER_LEN..HEADER_LEN + 4 * n];
    let mut values = Vec::with_capacity(n);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(v.abs() <= thresh) {
            return Err(format_err(
                "values",
                format!("value {v} at index {i} outside [-{thresh}, {thresh}]"),
            ));
        }
        values.push(v);
    }
    let known = if has_mask {
        let mut mask = Vec::with_capacity(n);
        for (i, &b) in bytes[HEADER_LEN + 4 * n..].iter().enumerate() {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                _ => {
                    return Err(format_err(
                        "known_mask",
                        format!("byte {b} at index {i} is not 0 or 1"),
                    ))
                }
            }
        }
        Some(mask)
    } else {
        None
    };
    TsdfGrid::new(s, thresh, values, known)
}

pub fn save_grid(grid: &TsdfGrid, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    write_grid(grid, std::io::BufWriter::new(f)).map_err(|e| io_err(path, e))
}

pub fn load_grid(path: &Path) -> Result<TsdfGrid> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse(&bytes)
}
