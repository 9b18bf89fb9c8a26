//! `AGGF` binary container, little-endian throughout.
//!
//! Embedding file:
//!
//! ```text
//! "AGGF" | version u32 = 1 | dtype u8 = 0 (f32) | rank u8 = 4
//!        | extents 4 x u64 (batch, grid_h, grid_w, channels)
//!        | payload f32 row-major | crc32 u32 of payload bytes
//! ```
//!
//! Named-tensor file (checkpoints) uses the same prefix with rank 0 as a
//! marker, followed by a section table:
//!
//! ```text
//! "AGGF" | version u32 = 1 | dtype u8 = 0 | rank u8 = 0 | count u32
//!        | count x (name_len u16 | name utf-8 | rank u8 | extents rank x u64 | offset u64)
//!        | payload f32 | crc32 u32 of payload bytes
//! ```
//!
//! Section offsets count f32 elements from the start of the payload.

use std::path::Path;

use super::grid::PatchGrid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGGF";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const EMBEDDING_RANK: u8 = 4;
const SECTION_MARKER: u8 = 0;
const EMBEDDING_HEADER_LEN: u64 = 4 + 4 + 1 + 1 + 4 * 8;

/// One named tensor in a section-table file.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!(
                    "truncated while reading {what}: expected at least {} bytes, found {}",
                    self.pos.saturating_add(n),
                    self.bytes.len()
                ),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_prefix(r: &mut Reader<'_>, expected_rank: u8) -> Result<()> {
    if r.bytes.len() < 4 || &r.bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"AGGF\""));
    }
    r.pos = 4;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = r.offset();
    let dtype = r.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(at, format!("unsupported dtype code {dtype}")));
    }
    let at = r.offset();
    let rank = r.u8("rank")?;
    if rank != expected_rank {
        return Err(Error::format(at, format!("expected rank byte {expected_rank}, found {rank}")));
    }
    Ok(())
}

fn write_prefix(out: &mut Vec<u8>, rank: u8) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(rank);
}

fn write_payload(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    let start = out.len();
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Reads `numel` f32 values plus the trailing CRC; the file must end there.
fn read_payload(r: &mut Reader<'_>, numel: u64) -> Result<Vec<f32>> {
    let payload_bytes = numel
        .checked_mul(4)
        .ok_or_else(|| Error::format(r.offset(), "payload size overflows"))?;
    let expected = (r.offset())
        .checked_add(payload_bytes)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::format(r.offset(), "payload size overflows"))?;
    let actual = r.bytes.len() as u64;
    if actual != expected {
        let kind = if actual < expected { "truncated file" } else { "trailing bytes" };
        return Err(Error::format(
            actual.min(expected),
            format!("{kind}: expected {expected} bytes, found {actual}"),
        ));
    }
    let start = r.offset();
    let raw = r.take(payload_bytes as usize, "payload")?;
    let stored = r.u32("checksum")?;
    let crc = crc32fast::hash(raw);
    if crc != stored {
        return Err(Error::format(
            start + payload_bytes,
            format!("payload checksum mismatch: stored {stored:#010x}, computed {crc:#010x}"),
        ));
    }
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn checked_numel(extents: &[u64], at: u64) -> Result<u64> {
    extents.iter().try_fold(1u64, |acc, &e| {
        acc.checked_mul(e)
            .filter(|&n| n <= (usize::MAX / 4) as u64)
            .ok_or_else(|| Error::format(at, format!("dimension overflow in extents {extents:?}")))
    })
}

pub fn encode_embeddings(g: &PatchGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN as usize + g.data().len() * 4 + 4);
    write_prefix(&mut out, EMBEDDING_RANK);
    for e in g.dims() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    write_payload(&mut out, g.data().iter().copied());
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<PatchGrid> {
    let mut r = Reader::new(bytes);
    read_prefix(&mut r, EMBEDDING_RANK)?;
    let at = r.offset();
    let mut extents = [0u64; 4];
    for e in &mut extents {
        *e = r.u64("extents")?;
    }
    if extents.contains(&0) {
        return Err(Error::format(at, format!("zero extent in {extents:?}")));
    }
    let numel = checked_numel(&extents, at)?;
    let data = read_payload(&mut r, numel)?;
    let [b, h, w, c] = extents.map(|e| e as usize);
    PatchGrid::new(b, h, w, c, data)
}

pub fn save_embeddings(g: &PatchGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(g)).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<PatchGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn encode_sections(sections: &[Section]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_prefix(&mut out, SECTION_MARKER);
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for s in sections {
        let numel: usize = s.shape.iter().product();
        if numel != s.data.len() || s.shape.len() > u8::MAX as usize {
            return Err(Error::dim(format!("section {} has inconsistent shape {:?}", s.name, s.shape)));
        }
        let name = s.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::dim("section name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(s.shape.len() as u8);
        for &e in &s.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += numel as u64;
    }
    write_payload(&mut out, sections.iter().flat_map(|s| s.data.iter().copied()));
    Ok(out)
}

pub fn decode_sections(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = Reader::new(bytes);
    read_prefix(&mut r, SECTION_MARKER)?;
    let count = r.u32("section count")?;
    let mut table = Vec::new();
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let at = r.offset();
        let len = r.u16("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| Error::format(at, "section name is not utf-8"))?
            .to_string();
        let rank = r.u8("section rank")? as usize;
        let at = r.offset();
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("section extents")?);
        }
        let numel = checked_numel(&shape, at)?;
        let offset_at = r.offset();
        let offset = r.u64("section offset")?;
        if offset != expected_offset {
            return Err(Error::format(
                offset_at,
                format!("section {name} at element {offset}, expected {expected_offset}"),
            ));
        }
        expected_offset = expected_offset
            .checked_add(numel)
            .ok_or_else(|| Error::format(at, "payload size overflows"))?;
        table.push((name, shape, offset, numel));
    }
    let payload = read_payload(&mut r, expected_offset)?;
    Ok(table
        .into_iter()
        .map(|(name, shape, offset, numel)| Section {
            name,
            shape: shape.into_iter().map(|e| e as usize).collect(),
            data: payload[offset as usize..(offset + numel) as usize].to_vec(),
        })
        .collect())
}
