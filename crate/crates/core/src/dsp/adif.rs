//! ADIF: the binary feature-file format shared with the pretrained-feature exporter.
//!
//! ```text
//! 0..4    magic "ADIF"
//! 4       version (1)
//! 5       source (0 = mfcc, 1 = pretrained)
//! 6..8    reserved, zero
//! 8..12   dim, u32 LE
//! 12..16  frame count, u32 LE
//! 16..20  frame shift in ms, f32 LE
//! 20..    frames * dim f32 LE, frame-major
//! ```

use std::path::Path;

use super::{FeatureMatrix, FeatureSource};
use crate::error::{Error, Result};

pub const ADIF_MAGIC: [u8; 4] = *b"ADIF";
pub const ADIF_VERSION: u8 = 1;
pub const ADIF_HEADER_LEN: usize = 20;

pub fn encode_adif(feat: &FeatureMatrix) -> Result<Vec<u8>> {
    if !feat.is_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let mut out = Vec::with_capacity(ADIF_HEADER_LEN + 4 * feat.data().len());
    out.extend_from_slice(&ADIF_MAGIC);
    out.push(ADIF_VERSION);
    out.push(feat.source.code());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(feat.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(feat.frames() as u32).to_le_bytes());
    out.extend_from_slice(&feat.frame_shift_ms.to_le_bytes());
    for v in feat.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_adif(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 4 {
        return Err(Error::AdifTruncated { expected: ADIF_HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != ADIF_MAGIC {
        return Err(Error::AdifMagic { found: magic });
    }
    if bytes.len() < ADIF_HEADER_LEN {
        return Err(Error::AdifTruncated { expected: ADIF_HEADER_LEN, found: bytes.len() });
    }
    if bytes[4] != ADIF_VERSION {
        return Err(Error::AdifVersion(bytes[4]));
    }
    let source = FeatureSource::from_code(bytes[5])?;
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let dim = u32_at(8) as usize;
    let frames = u32_at(12) as usize;
    let frame_shift_ms = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let payload = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Dimension(format!("header size {frames}x{dim} overflows")))?;
    let expected = ADIF_HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err(Error::AdifTruncated { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(Error::AdifTrailing { extra: bytes.len() - expected });
    }
    let data = bytes[ADIF_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(frames, dim, frame_shift_ms, source, data)
}

pub fn write_feature_file(path: impl AsRef<Path>, feat: &FeatureMatrix) -> Result<()> {
    let bytes = encode_adif(feat)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    decode_adif(&std::fs::read(path)?)
}
