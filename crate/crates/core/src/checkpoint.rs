//! `DELGCKPT` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   8 bytes  "DELGCKPT"
//! version u32
//! count   u32      number of named tensors
//! count x { name_len u32, name bytes (UTF-8), rank u32, dims rank x u64, values f64... }
//! crc32   u32      over every preceding byte
//! ```
//!
//! The model architecture travels in `meta.*` entries so a checkpoint is
//! self-describing; free-form tensors (e.g. the final attention score sample)
//! live under `extra.*`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::backbone::{BackboneConfig, LayerSpec};
use crate::heads::HeadConfig;
use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::numgraph::Tensor;

pub const MAGIC: &[u8; 8] = b"DELGCKPT";
pub const VERSION: u32 = 1;

const META_LAYERS: &str = "meta.backbone.layers";
const META_BACKBONE: &str = "meta.backbone.shape";
const META_HEADS: &str = "meta.heads";
const META_CLASSES: &str = "meta.num_classes";
const EXTRA_PREFIX: &str = "extra.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Auxiliary tensors stored under `extra.<name>`.
    pub extras: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            extras: BTreeMap::new(),
        }
    }
}

fn config_tensors(config: &ModelConfig) -> Vec<(String, Tensor)> {
    let b = &config.backbone;
    let layers: Vec<f64> = b
        .layers
        .iter()
        .flat_map(|l| {
            [
                l.kernel as f64,
                l.out_channels as f64,
                l.stride as f64,
                if l.residual { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let h = &config.heads;
    vec![
        (
            META_LAYERS.into(),
            Tensor::new(vec![b.layers.len(), 4], layers).expect("layer table"),
        ),
        (
            META_BACKBONE.into(),
            Tensor::vector(vec![
                b.tap_shallow as f64,
                b.tap_deep as f64,
                b.input_size as f64,
                b.in_channels as f64,
            ]),
        ),
        (
            META_HEADS.into(),
            Tensor::vector(vec![
                h.global_dim as f64,
                h.local_dim as f64,
                h.attention_hidden as f64,
                h.gem_power,
                h.arcface_margin,
            ]),
        ),
        (
            META_CLASSES.into(),
            Tensor::scalar(config.num_classes as f64),
        ),
    ]
}

fn config_from_tensors(table: &BTreeMap<String, Tensor>) -> Result<ModelConfig, CheckpointError> {
    let get = |name: &str| {
        table
            .get(name)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing `{name}`")))
    };
    let as_usize = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CheckpointError::Malformed(format!("expected an integer, got {v}")))
        }
    };
    let layers_t = get(META_LAYERS)?;
    if layers_t.rank() != 2 || layers_t.shape()[1] != 4 {
        return Err(CheckpointError::Malformed("bad layer table".into()));
    }
    let layers = layers_t
        .data()
        .chunks(4)
        .map(|r| {
            Ok(LayerSpec::new(
                as_usize(r[0])?,
                as_usize(r[1])?,
                as_usize(r[2])?,
                r[3] != 0.0,
            ))
        })
        .collect::<Result<Vec<_>, CheckpointError>>()?;
    let shape = get(META_BACKBONE)?.data();
    let heads = get(META_HEADS)?.data();
    let classes = get(META_CLASSES)?.data();
    if shape.len() != 4 || heads.len() != 5 || classes.len() != 1 {
        return Err(CheckpointError::Malformed("bad metadata lengths".into()));
    }
    let config = ModelConfig {
        backbone: BackboneConfig {
            layers,
            tap_shallow: as_usize(shape[0])?,
            tap_deep: as_usize(shape[1])?,
            input_size: as_usize(shape[2])?,
            in_channels: as_usize(shape[3])?,
        },
        heads: HeadConfig {
            global_dim: as_usize(heads[0])?,
            local_dim: as_usize(heads[1])?,
            attention_hidden: as_usize(heads[2])?,
            gem_power: heads[3],
            arcface_margin: heads[4],
        },
        num_classes: as_usize(classes[0])?,
    };
    config.validate()?;
    Ok(config)
}

/// Serializes a named tensor table with header and trailing CRC32.
pub fn encode_table<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses and checksums a named tensor table.
pub fn decode_table(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(CheckpointError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()?;
    let mut table = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
        let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        table.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(table)
}

pub fn encode(checkpoint: &Checkpoint) -> Vec<u8> {
    let meta = config_tensors(&checkpoint.model.config);
    let extras: Vec<(String, &Tensor)> = checkpoint
        .extras
        .iter()
        .map(|(k, v)| (format!("{EXTRA_PREFIX}{k}"), v))
        .collect();
    let entries = meta
        .iter()
        .map(|(k, v)| (k.as_str(), v))
        .chain(checkpoint.model.params.iter().map(|(k, v)| (k.as_str(), v)))
        .chain(extras.iter().map(|(k, v)| (k.as_str(), *v)));
    encode_table(entries)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let table = decode_table(bytes)?;
    let config = config_from_tensors(&table)?;
    let mut params = ParamStore::new();
    let mut extras = BTreeMap::new();
    for (name, t) in table {
        if let Some(extra) = name.strip_prefix(EXTRA_PREFIX) {
            extras.insert(extra.to_string(), t);
        } else if !name.starts_with("meta.") {
            params.insert(name, t);
        }
    }
    let expected = Model::init(config.clone(), 0)?;
    for (name, t) in &expected.params {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(CheckpointError::Malformed(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(ModelError::MissingParam(name.clone()).into()),
        }
    }
    Ok(Checkpoint {
        model: Model { config, params },
        extras,
    })
}

pub fn save(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, encode(checkpoint))?)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}
