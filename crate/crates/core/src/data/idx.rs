use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = fs::read(path).map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = vec![];
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { what, expected: at + 4, got: bytes.len() })
}

/// `(count, rows, cols, pixels)` from an IDX image file body.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { what: "images", expected: IMAGE_MAGIC, got: magic });
    }
    let n = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Truncated { what: "image data", expected: need, got: bytes.len() });
    }
    Ok((n, rows, cols, &bytes[16..need]))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { what: "labels", expected: LABEL_MAGIC, got: magic });
    }
    let n = be_u32(bytes, 4, "label header")? as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated { what: "label data", expected: 8 + n, got: bytes.len() });
    }
    Ok(&bytes[8..8 + n])
}

/// Reads an IDX image/label pair. Gzipped files are detected by their
/// header and inflated transparently. Pixels are scaled by 1/255.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ip, lp) = (image_path.as_ref(), label_path.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;
    let (n, rows, cols, pixels) = parse_images(&ib)?;
    let labels = parse_labels(&lb)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    if rows != cols || n == 0 {
        return Err(DataError::Shape(format!("expected square images, got {n}×{rows}×{cols}")));
    }
    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let name = ip.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::new([n, rows, cols], data).expect("idx shape"), labels.iter().map(|&l| l as u32).collect())
}

/// Writes a dataset as uncompressed IDX, quantizing with
/// `floor(v·255 + 0.5)`.
pub fn write_idx(ds: &Dataset, image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<(), DataError> {
    let s = ds.images.shape();
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, s[0] as u32, s[1] as u32, s[2] as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(ds.images.data().iter().map(|&v| quantize(v)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, s[0] as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.labels {
        let l = u8::try_from(l).map_err(|_| DataError::Shape(format!("label {l} does not fit a byte")))?;
        lab.push(l);
    }
    let write = |p: &Path, b: &[u8]| fs::write(p, b).map_err(|e| DataError::Io { path: p.display().to_string(), message: e.to_string() });
    write(image_path.as_ref(), &img)?;
    write(label_path.as_ref(), &lab)
}

/// Clamp to `[0,1]` then round half up to 8 bits.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
