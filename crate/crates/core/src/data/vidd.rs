use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const VIDD_MAGIC: &[u8; 4] = b"VIDD";
pub const VIDD_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

/// `VIDD`, version `u16`, then `n, classes, C, H, W` as `u32`, then the
/// `f32` images and the `u8` labels, all little-endian.
pub fn vidd_to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.images.len() * 4 + ds.len());
    out.extend_from_slice(VIDD_MAGIC);
    out.extend_from_slice(&VIDD_VERSION.to_le_bytes());
    for v in [ds.len(), ds.num_classes, ds.shape[0], ds.shape[1], ds.shape[2]] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &ds.images {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    out
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, len: usize) -> Result<&'a [u8]> {
    let end = offset.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(Error::Truncated {
        offset: bytes.len(),
        expected: offset.saturating_add(len),
    })?;
    let s = &bytes[*offset..end];
    *offset = end;
    Ok(s)
}

pub fn vidd_from_bytes(name: impl Into<String>, bytes: &[u8]) -> Result<Dataset> {
    let mut off = 0;
    if take(bytes, &mut off, 4)? != VIDD_MAGIC {
        return Err(Error::Format("bad magic, expected VIDD".into()));
    }
    let version = u16::from_le_bytes(take(bytes, &mut off, 2)?.try_into().unwrap());
    if version != VIDD_VERSION {
        return Err(Error::Format(format!("unsupported VIDD version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = u32::from_le_bytes(take(bytes, &mut off, 4)?.try_into().unwrap()) as usize;
    }
    let [n, classes, c, h, w] = dims;
    let count = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let raw = take(bytes, &mut off, count * 4)?;
    let images = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let labels = take(bytes, &mut off, n)?.to_vec();
    if off != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after labels", bytes.len() - off)));
    }
    Dataset::new(name, classes, [c, h, w], images, labels)
}

pub fn save_vidd(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, vidd_to_bytes(ds)).map_err(|e| Error::io(path, e))
}

/// Loads a dataset; its name is the file stem.
pub fn load_vidd(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    vidd_from_bytes(name, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        Dataset::new("s", 3, [1, 2, 2], (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(), vec![0, 2, 1]).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = vidd_to_bytes(&sample());
        let back = vidd_from_bytes("s", &bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(vidd_to_bytes(&back), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = vidd_to_bytes(&sample());
        let err = vidd_from_bytes("s", &bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Truncated { offset, .. } if offset == bytes.len() - 2), "{err}");
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = vidd_to_bytes(&sample());
        bytes[0] = b'X';
        assert!(matches!(vidd_from_bytes("s", &bytes), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut bytes = vidd_to_bytes(&sample());
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(matches!(vidd_from_bytes("s", &bytes), Err(Error::LabelOutOfRange { index: 2, label: 7, .. })));
    }
}
