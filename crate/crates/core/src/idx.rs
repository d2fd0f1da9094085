//! Reader and writer for the big-endian IDX files that distribute MNIST.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

/// Unsigned-byte image stack, row-major per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn body(&self, len: usize, what: &str) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: expected {len} bytes, found {available}"),
            });
        }
        if available > len {
            return Err(Error::Format {
                offset: (self.pos + len) as u64,
                message: format!("{} trailing bytes after {what}", available - len),
            });
        }
        Ok(&self.bytes[self.pos..])
    }
}

fn expect_magic(cur: &mut Cursor, magic: u32) -> Result<()> {
    let found = cur.u32("magic number")?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic number {found}, expected {magic}"),
        });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, IMAGE_MAGIC)?;
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let pixels = cur.body(count * rows * cols, "pixel data")?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, LABEL_MAGIC)?;
    let count = cur.u32("label count")? as usize;
    Ok(cur.body(count, "label data")?.to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGE_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    parse_images(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    parse_labels(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_images(path: &Path, images: &IdxImages) -> Result<()> {
    fs::write(path, encode_images(images)).map_err(|e| Error::io(path, e))
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}
