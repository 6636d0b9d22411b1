//! `DELGFEAT` feature files (little-endian):
//!
//! ```text
//! magic   8 bytes "DELGFEAT"
//! version u32
//! flags   u32     bit 0: descriptors are binarized
//! c_f     u32
//! c_t     u32
//! global  c_f x f32
//! count   u32
//! count x { x, y, scale, score: f32; descriptor: c_t x f32 or ceil(c_t/8) bytes }
//! crc32   u32     over every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Descriptors, ImageFeatures, Keypoint, LocalFeatures};

pub const FEAT_MAGIC: &[u8; 8] = b"DELGFEAT";
pub const FEAT_VERSION: u32 = 1;
const FLAG_BINARY: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4;

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("unsupported feature file version {0}")]
    Version(u32),
    #[error("feature file truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed feature file: {0}")]
    Malformed(String),
}

pub fn encode_features(features: &ImageFeatures) -> Vec<u8> {
    let local = &features.local;
    let desc = &local.descriptors;
    let mut buf = Vec::with_capacity(
        HEADER_LEN + 8 + features.global.len() * 4 + local.len() * (16 + desc.row_bytes()),
    );
    buf.extend_from_slice(FEAT_MAGIC);
    buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
    let flags = if desc.is_binary() { FLAG_BINARY } else { 0 };
    buf.extend_from_slice(&flags.to_le_bytes());
    buf.extend_from_slice(&(features.global.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(desc.dim() as u32).to_le_bytes());
    for v in &features.global {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(local.len() as u32).to_le_bytes());
    for (i, k) in local.keypoints.iter().enumerate() {
        for v in [k.x, k.y, k.scale, k.score] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        match desc {
            Descriptors::Float { .. } => {
                for v in desc.float(i) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Descriptors::Binary { .. } => buf.extend_from_slice(desc.bits(i)),
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FeatureFileError> {
        let end = self.pos.checked_add(n).ok_or(FeatureFileError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(FeatureFileError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, FeatureFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FeatureFileError> {
        let raw = self.take(n.checked_mul(4).ok_or(FeatureFileError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<ImageFeatures, FeatureFileError> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(FeatureFileError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FeatureFileError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != FEAT_MAGIC {
        return Err(FeatureFileError::BadMagic);
    }
    let version = r.u32()?;
    if version != FEAT_VERSION {
        return Err(FeatureFileError::Version(version));
    }
    let flags = r.u32()?;
    if flags & !FLAG_BINARY != 0 {
        return Err(FeatureFileError::Malformed(format!("unknown flags {flags:#x}")));
    }
    let binary = flags & FLAG_BINARY != 0;
    let c_f = r.u32()? as usize;
    let c_t = r.u32()? as usize;
    let global = r.f32s(c_f)?;
    let count = r.u32()? as usize;
    let mut local = LocalFeatures::empty(c_t, binary);
    let remaining = body.len() - r.pos;
    let record = 16 + local.descriptors.row_bytes();
    if count.checked_mul(record) != Some(remaining) {
        return Err(FeatureFileError::Malformed(format!(
            "{count} records of {record} bytes do not fill {remaining} bytes"
        )));
    }
    for _ in 0..count {
        let k = r.f32s(4)?;
        local.keypoints.push(Keypoint {
            x: k[0],
            y: k[1],
            scale: k[2],
            score: k[3],
        });
        match &mut local.descriptors {
            Descriptors::Float { data, .. } => data.extend(r.f32s(c_t)?),
            Descriptors::Binary { data, .. } => data.extend_from_slice(r.take(c_t.div_ceil(8))?),
        }
    }
    Ok(ImageFeatures { global, local })
}

pub fn save_features(path: &Path, features: &ImageFeatures) -> Result<(), FeatureFileError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, encode_features(features))?)
}

pub fn load_features(path: &Path) -> Result<ImageFeatures, FeatureFileError> {
    decode_features(&fs::read(path)?)
}
