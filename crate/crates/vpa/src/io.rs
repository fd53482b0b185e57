//! Tagged-section binary container shared by dataset archives, model
//! checkpoints, and plan/trace archives.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes (ASCII, zero padded)
//! version   u32
//! manifest  u64 length + UTF-8 JSON (human readable)
//! sections  repeated: tag [u8;4], u64 length, payload
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, VpaError};

pub struct ContainerWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl ContainerWriter {
    pub fn create(path: &Path, magic: &[u8; 8], version: u32, manifest: &str) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        out.write_all(magic)?;
        out.write_all(&version.to_le_bytes())?;
        out.write_all(&(manifest.len() as u64).to_le_bytes())?;
        out.write_all(manifest.as_bytes())?;
        Ok(ContainerWriter { out })
    }

    pub fn section(&mut self, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
        self.out.write_all(tag)?;
        self.out.write_all(&(payload.len() as u64).to_le_bytes())?;
        self.out.write_all(payload)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub struct Container {
    pub version: u32,
    pub manifest: String,
    pub sections: BTreeMap<[u8; 4], Vec<u8>>,
}

impl Container {
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut head = [0u8; 8];
        read_exact(&mut file, &mut head, "magic")?;
        if &head != magic {
            return Err(VpaError::format(
                "magic",
                format!("expected {:?}, found {:?}", magic, head),
            ));
        }
        let version = read_u32(&mut file, "version")?;
        let mlen = read_u64(&mut file, "manifest length")? as usize;
        let mut mbuf = vec![0u8; mlen];
        read_exact(&mut file, &mut mbuf, "manifest")?;
        let manifest = String::from_utf8(mbuf)
            .map_err(|e| VpaError::format("manifest", format!("not UTF-8: {e}")))?;

        let mut sections = BTreeMap::new();
        loop {
            let mut tag = [0u8; 4];
            match file.read(&mut tag)? {
                0 => break,
                4 => {}
                _ => {
                    // Partial tag at EOF.
                    return Err(VpaError::format("section tag", "truncated file"));
                }
            }
            let len = read_u64(&mut file, "section length")? as usize;
            let mut payload = vec![0u8; len];
            read_exact(&mut file, &mut payload, &tag_name(&tag))?;
            sections.insert(tag, payload);
        }
        Ok(Container {
            version,
            manifest,
            sections,
        })
    }

    pub fn take(&mut self, tag: &[u8; 4]) -> Result<Vec<u8>> {
        self.sections
            .remove(tag)
            .ok_or_else(|| VpaError::format(tag_name(tag), "missing section"))
    }

    pub fn take_optional(&mut self, tag: &[u8; 4]) -> Option<Vec<u8>> {
        self.sections.remove(tag)
    }
}

fn tag_name(tag: &[u8; 4]) -> String {
    String::from_utf8_lossy(tag).into_owned()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| VpaError::format(field, "truncated file"))
}

fn read_u32<R: Read>(r: &mut R, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, field)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, field: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, field)?;
    Ok(u64::from_le_bytes(b))
}

/// Numbered parameter section tag: "P000", "P001", ...
pub fn param_tag(i: usize) -> [u8; 4] {
    let mut tag = *b"P\0\0\0";
    tag[1] = (i / 100) as u8 + b'0';
    tag[2] = ((i / 10) % 10) as u8 + b'0';
    tag[3] = (i % 10) as u8 + b'0';
    tag
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32s(bytes: &[u8], field: &str) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(VpaError::format(field, "length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn u32s_to_bytes(values: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_u32s(bytes: &[u8], field: &str) -> Result<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return Err(VpaError::format(field, "length not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
