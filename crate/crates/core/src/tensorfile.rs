//! Flat binary grids shared by embedding tables and latent grids.
//!
//! Layout, all little-endian 32-bit: `magic, version, H, W, d, base (f32),
//! reserved, reserved`, then `H·W·d` f32 values row-major (`[H][W][d]`).

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MAGIC: u32 = 0x4752_4B50; // "PKRG" read little-endian
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridHeader {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Frequency base for embedding tables; 0 for latent grids.
    pub base: f32,
}

pub fn encode(grid: &Raster<f32>, base: f32) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + grid.data().len() * 4);
    for word in [MAGIC, VERSION, grid.height() as u32, grid.width() as u32, grid.channels() as u32] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    out.extend_from_slice(&base.to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    for v in grid.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(GridHeader, Raster<f32>)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::parse("grid file shorter than its header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
    if word(0) != MAGIC {
        return Err(Error::parse(format!("bad grid magic {:#010x}", word(0))));
    }
    if word(1) != VERSION {
        return Err(Error::parse(format!("unsupported grid version {}", word(1))));
    }
    let header = GridHeader {
        height: word(2) as usize,
        width: word(3) as usize,
        depth: word(4) as usize,
        base: f32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")),
    };
    let n = header.height * header.width * header.depth;
    let body = &bytes[HEADER_BYTES..];
    if body.len() != n * 4 {
        return Err(Error::parse(format!(
            "grid body holds {} bytes, header promises {}",
            body.len(),
            n * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let grid = Raster::from_vec(header.width, header.height, header.depth, data)?;
    Ok((header, grid))
}

pub fn write(path: &Path, grid: &Raster<f32>, base: f32) -> Result<()> {
    std::fs::write(path, encode(grid, base)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(GridHeader, Raster<f32>)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_sizes() {
        let g = Raster::from_fn(8, 4, 6, |r, c, k| (r * 100 + c * 10 + k) as f32);
        let bytes = encode(&g, 10000.0);
        assert_eq!(bytes.len(), 32 + 4 * 8 * 6 * 4);
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h, GridHeader { height: 4, width: 8, depth: 6, base: 10000.0 });
        assert_eq!(back, g);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let g = Raster::filled(2, 2, 1, 0.5f32);
        let mut bytes = encode(&g, 0.0);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] ^= 1;
        assert!(decode(&bytes).is_err());
    }
}
