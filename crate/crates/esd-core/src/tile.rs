//! Bit-exact storage for quantized embedding tiles.
//!
//! A tile is a `[T, H, W]` grid of uint16 codes for one tile id and year.
//! The on-disk format ("ESD1") is little-endian and self-describing, so
//! desk-scale shapes coexist with production `[12, 3600, 3600]` tiles.
//! Payloads are stored raw or wrapped in DEFLATE (RFC 1951).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

pub const TILE_MAGIC: [u8; 4] = *b"ESD1";
pub const TILE_VERSION: u16 = 1;
const FLAG_DEFLATE: u16 = 1;

#[derive(Debug, Error)]
pub enum TileError {
    #[error("bad magic: expected \"ESD1\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported tile version {0}")]
    BadVersion(u16),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("code {code} at index {index} out of range for codebook size {codebook}")]
    CodeOutOfRange {
        code: u16,
        index: usize,
        codebook: u64,
    },
    #[error("malformed tile: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Quantized codes for one tile and year, row-major `[T, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EmbeddingTile {
    pub tile_id: String,
    pub year: u16,
    pub t_lat: usize,
    pub height: usize,
    pub width: usize,
    pub fsq_levels: Vec<u16>,
    pub codes: Vec<u16>,
}

impl EmbeddingTile {
    pub fn new(
        tile_id: impl Into<String>,
        year: u16,
        t_lat: usize,
        height: usize,
        width: usize,
        fsq_levels: Vec<u16>,
        codes: Vec<u16>,
    ) -> Result<Self, TileError> {
        let tile = Self {
            tile_id: tile_id.into(),
            year,
            t_lat,
            height,
            width,
            fsq_levels,
            codes,
        };
        tile.validate()?;
        Ok(tile)
    }

    pub fn codebook_size(&self) -> u64 {
        self.fsq_levels
            .iter()
            .fold(1u64, |acc, &l| acc.saturating_mul(u64::from(l)))
    }

    pub fn validate(&self) -> Result<(), TileError> {
        if self.tile_id.len() > usize::from(u16::MAX) {
            return Err(TileError::Malformed(format!(
                "tile id length {} exceeds u16",
                self.tile_id.len()
            )));
        }
        if self.t_lat == 0 || self.height == 0 || self.width == 0 {
            return Err(TileError::Malformed(format!(
                "empty extent [{}, {}, {}]",
                self.t_lat, self.height, self.width
            )));
        }
        if self.t_lat > usize::from(u16::MAX) {
            return Err(TileError::Malformed(format!("T {} exceeds u16", self.t_lat)));
        }
        if self.height > u32::MAX as usize || self.width > u32::MAX as usize {
            return Err(TileError::Malformed("H or W exceeds u32".into()));
        }
        if self.fsq_levels.is_empty() || self.fsq_levels.len() > usize::from(u8::MAX) {
            return Err(TileError::Malformed(format!(
                "level count {} outside 1..=255",
                self.fsq_levels.len()
            )));
        }
        if self.fsq_levels.iter().any(|&l| l < 2) {
            return Err(TileError::Malformed("quantizer level < 2".into()));
        }
        let expected = self
            .t_lat
            .checked_mul(self.height)
            .and_then(|n| n.checked_mul(self.width))
            .ok_or_else(|| TileError::Malformed("extent product overflow".into()))?;
        if self.codes.len() != expected {
            return Err(TileError::Malformed(format!(
                "code count {} does not match extents [{}, {}, {}]",
                self.codes.len(),
                self.t_lat,
                self.height,
                self.width
            )));
        }
        let codebook = self.codebook_size();
        for (index, &code) in self.codes.iter().enumerate() {
            if u64::from(code) >= codebook {
                return Err(TileError::CodeOutOfRange {
                    code,
                    index,
                    codebook,
                });
            }
        }
        Ok(())
    }

    /// Size of the uncompressed uint16 payload in bytes.
    pub fn raw_payload_bytes(&self) -> usize {
        self.codes.len() * 2
    }
}

/// Serializes a tile to the ESD1 byte format.
pub fn pack_tile(tile: &EmbeddingTile, compress: bool) -> Result<Vec<u8>, TileError> {
    tile.validate()?;
    let mut out = Vec::with_capacity(32 + tile.raw_payload_bytes() / if compress { 4 } else { 1 });
    out.extend_from_slice(&TILE_MAGIC);
    out.extend_from_slice(&TILE_VERSION.to_le_bytes());
    let flags: u16 = if compress { FLAG_DEFLATE } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&(tile.tile_id.len() as u16).to_le_bytes());
    out.extend_from_slice(tile.tile_id.as_bytes());
    out.extend_from_slice(&tile.year.to_le_bytes());
    out.extend_from_slice(&(tile.t_lat as u16).to_le_bytes());
    out.extend_from_slice(&(tile.height as u32).to_le_bytes());
    out.extend_from_slice(&(tile.width as u32).to_le_bytes());
    out.push(tile.fsq_levels.len() as u8);
    for &level in &tile.fsq_levels {
        out.extend_from_slice(&level.to_le_bytes());
    }
    let mut payload = Vec::with_capacity(tile.raw_payload_bytes());
    for &code in &tile.codes {
        payload.extend_from_slice(&code.to_le_bytes());
    }
    if compress {
        let mut enc = DeflateEncoder::new(out, Compression::default());
        enc.write_all(&payload)?;
        out = enc.finish()?;
    } else {
        out.extend_from_slice(&payload);
    }
    Ok(out)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TileError> {
        if self.at + n > self.bytes.len() {
            return Err(TileError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TileError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, TileError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TileError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn rest(&mut self) -> &'a [u8] {
        let slice = &self.bytes[self.at..];
        self.at = self.bytes.len();
        slice
    }
}

/// Parses ESD1 bytes back into a tile; exact inverse of [`pack_tile`].
pub fn unpack_tile(bytes: &[u8]) -> Result<EmbeddingTile, TileError> {
    let mut r = ByteReader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != TILE_MAGIC {
        return Err(TileError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u16("version")?;
    if version != TILE_VERSION {
        return Err(TileError::BadVersion(version));
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_DEFLATE != 0 {
        return Err(TileError::Malformed(format!("unknown flag bits {flags:#06x}")));
    }
    let id_len = usize::from(r.u16("tile id length")?);
    let id_bytes = r.take(id_len, "tile id")?;
    let tile_id = std::str::from_utf8(id_bytes)
        .map_err(|_| TileError::Malformed("tile id is not UTF-8".into()))?
        .to_owned();
    let year = r.u16("year")?;
    let t_lat = usize::from(r.u16("T")?);
    let height = r.u32("H")? as usize;
    let width = r.u32("W")? as usize;
    let d = usize::from(r.u8("level count")?);
    if d == 0 {
        return Err(TileError::Malformed("level count is zero".into()));
    }
    let mut fsq_levels = Vec::with_capacity(d);
    for _ in 0..d {
        fsq_levels.push(r.u16("levels")?);
    }
    let n = t_lat
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| TileError::Malformed("extent product overflow".into()))?;
    let expected = n
        .checked_mul(2)
        .ok_or_else(|| TileError::Malformed("payload size overflow".into()))?;

    let payload: Vec<u8> = if flags & FLAG_DEFLATE != 0 {
        let compressed = r.rest();
        let mut raw = Vec::with_capacity(expected);
        // Read one byte past the expected length so oversized streams are
        // caught without decompressing unbounded data.
        let mut dec = DeflateDecoder::new(compressed).take(expected as u64 + 1);
        dec.read_to_end(&mut raw).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                TileError::Truncated("DEFLATE stream ended early".into())
            } else {
                TileError::Malformed(format!("DEFLATE payload: {e}"))
            }
        })?;
        match raw.len().cmp(&expected) {
            std::cmp::Ordering::Less => {
                return Err(TileError::Truncated(format!(
                    "payload: expected {expected} bytes, decompressed {}",
                    raw.len()
                )))
            }
            std::cmp::Ordering::Greater => {
                return Err(TileError::Malformed("payload longer than extents imply".into()))
            }
            std::cmp::Ordering::Equal => {}
        }
        raw
    } else {
        let raw = r.take(expected, "payload")?;
        if r.at != bytes.len() {
            return Err(TileError::Malformed(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.at
            )));
        }
        raw.to_vec()
    };

    let mut codes = Vec::with_capacity(n);
    for chunk in payload.chunks_exact(2) {
        codes.push(u16::from_le_bytes([chunk[0], chunk[1]]));
    }
    EmbeddingTile::new(tile_id, year, t_lat, height, width, fsq_levels, codes)
}

/// Conventional file location for a tile: `{root}/{year}/{tile_id}.esd`.
pub fn tile_path(root: &Path, year: u16, tile_id: &str) -> PathBuf {
    root.join(year.to_string()).join(format!("{tile_id}.esd"))
}

pub fn save_tile(root: &Path, tile: &EmbeddingTile, compress: bool) -> Result<PathBuf, TileError> {
    let path = tile_path(root, tile.year, &tile.tile_id);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = pack_tile(tile, compress)?;
    std::fs::write(&path, bytes)?;
    Ok(path)
}

pub fn load_tile(path: &Path) -> Result<EmbeddingTile, TileError> {
    let bytes = std::fs::read(path)?;
    unpack_tile(&bytes)
}

/// Storage accounting for a tile product versus a daily-reflectance baseline.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VolumeReport {
    pub baseline_tile_bytes: f64,
    pub stored_tile_bytes: f64,
    pub compression_ratio: f64,
    pub region_tiles: u64,
    pub region_total_bytes: f64,
    pub global_tiles: u64,
    pub global_total_bytes: f64,
    pub baseline_global_bytes: f64,
}

pub const BYTES_PER_MIB: f64 = 1024.0 * 1024.0;
pub const BYTES_PER_GIB: f64 = 1024.0 * BYTES_PER_MIB;
pub const BYTES_PER_TIB: f64 = 1024.0 * BYTES_PER_GIB;

pub fn volume_report(
    stored_tile_bytes: f64,
    region_tiles: u64,
    global_tiles: u64,
    baseline_tile_bytes: f64,
) -> Result<VolumeReport, TileError> {
    if !(stored_tile_bytes > 0.0) || !stored_tile_bytes.is_finite() {
        return Err(TileError::Malformed(format!(
            "stored tile bytes must be positive, got {stored_tile_bytes}"
        )));
    }
    if !(baseline_tile_bytes > 0.0) || !baseline_tile_bytes.is_finite() {
        return Err(TileError::Malformed(format!(
            "baseline tile bytes must be positive, got {baseline_tile_bytes}"
        )));
    }
    Ok(VolumeReport {
        baseline_tile_bytes,
        stored_tile_bytes,
        compression_ratio: baseline_tile_bytes / stored_tile_bytes,
        region_tiles,
        region_total_bytes: stored_tile_bytes * region_tiles as f64,
        global_tiles,
        global_total_bytes: stored_tile_bytes * global_tiles as f64,
        baseline_global_bytes: baseline_tile_bytes * global_tiles as f64,
    })
}
