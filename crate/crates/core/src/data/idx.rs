//! IDX (MNIST) files: big-endian `u32` magic, `u32` dimensions, then bytes.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::TaggedSample;
use crate::error::{Error, Result};
use crate::linalg::Vector;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

fn header(cur: &mut Cursor<Vec<u8>>, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let truncated = |_| Error::Malformed("IDX header is truncated".into());
    let found = cur.read_u32::<BigEndian>().map_err(truncated)?;
    if found != magic {
        return Err(Error::Malformed(format!("bad IDX magic {found:#010x}, expected {magic:#010x}")));
    }
    (0..dims).map(|_| cur.read_u32::<BigEndian>().map(|v| v as usize).map_err(truncated)).collect()
}

fn body(cur: &mut Cursor<Vec<u8>>, len: usize, count: usize) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(len);
    cur.take(len as u64).read_to_end(&mut bytes)?;
    if bytes.len() != len {
        return Err(Error::Malformed(format!("IDX body is truncated: header announces {count} records")));
    }
    Ok(bytes)
}

/// Images scaled to `[0, 1]` and flattened row-major; tagged IDD, unlabelled.
pub fn read_idx(path: impl AsRef<Path>) -> Result<Vec<TaggedSample>> {
    let mut cur = Cursor::new(fs::read(path)?);
    let dims = header(&mut cur, IDX_IMAGE_MAGIC, 3)?;
    let (count, pixels) = (dims[0], dims[1] * dims[2]);
    let bytes = body(&mut cur, count * pixels, count)?;
    Ok(bytes
        .chunks_exact(pixels.max(1))
        .take(count)
        .map(|img| TaggedSample {
            features: Vector(img.iter().map(|&b| b as f64 / 255.0).collect()),
            class_label: None,
            ood_tag: super::OodTag::Idd,
        })
        .collect())
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let mut cur = Cursor::new(fs::read(path)?);
    let count = header(&mut cur, IDX_LABEL_MAGIC, 1)?[0];
    Ok(body(&mut cur, count, count)?.into_iter().map(usize::from).collect())
}

/// Images with their labels; the two files must hold the same record count.
pub fn read_idx_pair(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Vec<TaggedSample>> {
    let mut samples = read_idx(images)?;
    let labels = read_idx_labels(labels)?;
    if samples.len() != labels.len() {
        return Err(Error::Malformed(format!("{} images but {} labels", samples.len(), labels.len())));
    }
    for (s, l) in samples.iter_mut().zip(labels) {
        s.class_label = Some(l);
    }
    Ok(samples)
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, images: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.write_u32::<BigEndian>(IDX_IMAGE_MAGIC)?;
    for d in [images.len(), rows, cols] {
        out.write_u32::<BigEndian>(d as u32)?;
    }
    for img in images {
        if img.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, actual: img.len() });
        }
        out.write_all(img)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABEL_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.write_all(labels)?;
    fs::write(path, out)?;
    Ok(())
}
