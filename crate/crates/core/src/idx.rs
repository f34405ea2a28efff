//! IDX container parsing and writing. Big-endian: a magic word encoding the
//! element type and rank, one u32 per dimension, then the raw u8 payload.
//! Images use magic 0x00000803 (rank 3: N,H,W), labels 0x00000801 (rank 1).

use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(buf: &[u8], pos: usize, path: &Path) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated header at offset {pos}",
                path.display()
            ))
        })
}

/// Raw image payload: (N, H, W, pixel bytes in row-major order).
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, want image magic 0x{IMAGES_MAGIC:08x}",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    let h = be_u32(&buf, 8, path)? as usize;
    let w = be_u32(&buf, 12, path)? as usize;
    let want = 16 + n * h * w;
    if buf.len() != want {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header {}x{}x{} wants {}",
            path.display(),
            buf.len() - 16.min(buf.len()),
            n,
            h,
            w,
            want - 16
        )));
    }
    Ok((n, h, w, buf[16..].to_vec()))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&buf, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, want label magic 0x{LABELS_MAGIC:08x}",
            path.display()
        )));
    }
    let n = be_u32(&buf, 4, path)? as usize;
    if buf.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, header wants {n}",
            path.display(),
            buf.len().saturating_sub(8)
        )));
    }
    Ok(buf[8..].to_vec())
}

pub fn write_idx_images(
    path: impl AsRef<Path>,
    h: usize,
    w: usize,
    pixels: &[u8],
) -> Result<()> {
    let path = path.as_ref();
    if h == 0 || w == 0 || pixels.len() % (h * w) != 0 {
        return Err(Error::Data(format!(
            "pixel buffer of {} bytes is not a whole number of {h}x{w} images",
            pixels.len()
        )));
    }
    let n = pixels.len() / (h * w);
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(n as u32).to_be_bytes());
    buf.extend_from_slice(&(h as u32).to_be_bytes());
    buf.extend_from_slice(&(w as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    buf.extend_from_slice(labels);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
