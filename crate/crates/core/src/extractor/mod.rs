//! Multi-scale inference: the final global descriptor and the attention-selected
//! local features of one image, plus sign binarization of local descriptors.

mod format;

use std::cmp::Ordering;

use thiserror::Error;

use crate::backbone::{self, keypoint_center, receptive_field_of, Tap};
use crate::heads::{self, AttentionParams, AutoencoderParams, GlobalHeadParams};
use crate::model::{Bound, Model, ModelError};
use crate::numgraph::{Graph, Tensor, NORM_EPS};

pub use format::{
    decode_features, encode_features, load_features, save_features, FeatureFileError, FEAT_MAGIC,
    FEAT_VERSION,
};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid extraction configuration: {0}")]
    InvalidConfig(String),
    #[error("no usable global scale: every scale was too small or gave a near-zero descriptor")]
    NoGlobalScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    pub global_scales: Vec<f64>,
    pub local_scales: Vec<f64>,
    pub max_local: usize,
    /// Attention threshold; positions scoring below it are never selected.
    pub tau: f64,
    pub binarize: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            global_scales: vec![std::f64::consts::FRAC_1_SQRT_2, 1.0, std::f64::consts::SQRT_2],
            local_scales: geometric_scales(0.25, 2.0, 7),
            max_local: 1000,
            tau: 0.0,
            binarize: false,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractError> {
        for (name, scales) in [("global", &self.global_scales), ("local", &self.local_scales)] {
            if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(ExtractError::InvalidConfig(format!(
                    "{name} scales must be positive and finite"
                )));
            }
            if scales.windows(2).any(|w| w[0] >= w[1]) {
                return Err(ExtractError::InvalidConfig(format!(
                    "{name} scales must be strictly ascending"
                )));
            }
        }
        if self.global_scales.is_empty() {
            return Err(ExtractError::InvalidConfig("no global scales".into()));
        }
        if self.tau.is_nan() {
            return Err(ExtractError::InvalidConfig("tau is NaN".into()));
        }
        Ok(())
    }
}

/// `n` scales from `lo` to `hi` with a constant ratio between neighbours.
pub fn geometric_scales(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
            .collect(),
    }
}

/// Location and strength of a local feature, in original-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub scale: f32,
    pub score: f32,
}

/// Row-major local descriptors: unit-norm floats or packed sign bits
/// (bit `i` of a row is set when component `i` was positive, LSB first).
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    Float { dim: usize, data: Vec<f32> },
    Binary { dim: usize, data: Vec<u8> },
}

impl Descriptors {
    pub fn empty(dim: usize, binary: bool) -> Self {
        if binary {
            Self::Binary { dim, data: Vec::new() }
        } else {
            Self::Float { dim, data: Vec::new() }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Float { dim, .. } | Self::Binary { dim, .. } => *dim,
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Self::Binary { .. })
    }

    /// Bytes per row of the packed representation.
    pub fn row_bytes(&self) -> usize {
        match self {
            Self::Float { dim, .. } => dim * 4,
            Self::Binary { dim, .. } => dim.div_ceil(8),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Float { dim, data } => data.len().checked_div(*dim).unwrap_or(0),
            Self::Binary { dim, data } => data.len().checked_div(dim.div_ceil(8)).unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Float row `i`. Panics on binary descriptors.
    pub fn float(&self, i: usize) -> &[f32] {
        match self {
            Self::Float { dim, data } => &data[i * dim..(i + 1) * dim],
            Self::Binary { .. } => panic!("float row requested from binary descriptors"),
        }
    }

    /// Packed bit row `i`. Panics on float descriptors.
    pub fn bits(&self, i: usize) -> &[u8] {
        match self {
            Self::Binary { dim, data } => {
                let n = dim.div_ceil(8);
                &data[i * n..(i + 1) * n]
            }
            Self::Float { .. } => panic!("bit row requested from float descriptors"),
        }
    }

    /// Sign-binarizes float rows; binary rows are returned unchanged.
    pub fn binarized(&self) -> Self {
        match self {
            Self::Binary { .. } => self.clone(),
            Self::Float { dim, data } => Self::Binary {
                dim: *dim,
                data: data.chunks(*dim).flat_map(binarize).collect(),
            },
        }
    }
}

/// `b(x) = +1` if `x > 0`, else `-1`, packed as set/unset bits.
pub fn binarize(descriptor: &[f32]) -> Vec<u8> {
    let mut bits = vec![0u8; descriptor.len().div_ceil(8)];
    for (i, &v) in descriptor.iter().enumerate() {
        if v > 0.0 {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    bits
}

/// Expands packed bits back to a `±1` vector of length `dim`.
pub fn unpack_signs(bits: &[u8], dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if bits[i / 8] >> (i % 8) & 1 == 1 { 1.0 } else { -1.0 })
        .collect()
}

pub fn hamming(a: &[u8], b: &[u8]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Descriptors,
}

impl LocalFeatures {
    pub fn empty(dim: usize, binary: bool) -> Self {
        Self {
            keypoints: Vec::new(),
            descriptors: Descriptors::empty(dim, binary),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn binarized(&self) -> Self {
        Self {
            keypoints: self.keypoints.clone(),
            descriptors: self.descriptors.binarized(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// Unit-norm global descriptor.
    pub global: Vec<f32>,
    pub local: LocalFeatures,
}

/// Bilinear resize of an `[H,W,C]` image to `round(side * scale)` per axis,
/// sampling at pixel centres. Scale 1 returns the input unchanged.
pub fn resize(image: &Tensor, scale: f64) -> Result<Tensor, ModelError> {
    if image.rank() != 3 {
        return Err(ModelError::InvalidInput(format!(
            "expected an [H,W,C] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    if oh == h && ow == w {
        return Ok(image.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let ratio = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let rows = taps(oh, h);
    let cols = taps(ow, w);
    let src = image.data();
    let mut data = Vec::with_capacity(oh * ow * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::new(vec![oh, ow, c], data)?)
}

struct ScaleMaps {
    shallow: Tensor,
    deep: Option<Tensor>,
}

/// Backbone maps of `image` at `scale`, or `None` when the resized image is
/// below the backbone's minimum side.
fn scale_maps(
    model: &Model,
    image: &Tensor,
    scale: f64,
    need_deep: bool,
) -> Result<Option<ScaleMaps>, ModelError> {
    let cfg = &model.config.backbone;
    let resized = resize(image, scale)?;
    if resized.shape()[0].min(resized.shape()[1]) < cfg.min_side() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, &model.params, "backbone.")?;
    let x = g.constant(crate::model::batched(&resized)?)?;
    let last = if need_deep { cfg.tap_deep } else { cfg.tap_shallow };
    let outs = backbone::forward_layers(&mut g, cfg, &bound, x, last)?;
    Ok(Some(ScaleMaps {
        shallow: g.value(outs[cfg.tap_shallow]).clone(),
        deep: need_deep.then(|| g.value(outs[cfg.tap_deep]).clone()),
    }))
}

struct Candidate {
    score: f32,
    scale_index: usize,
    h: usize,
    w: usize,
    descriptor: Vec<f64>,
}

fn rank_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.scale_index.cmp(&b.scale_index))
        .then(a.h.cmp(&b.h))
        .then(a.w.cmp(&b.w))
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > NORM_EPS).then(|| v.iter().map(|x| x / norm).collect())
}

/// Global descriptor and local features of one `[H,W,3]` image.
///
/// Each scale runs the backbone once; scales used only for local features stop
/// at the shallow tap.
pub fn extract(
    image: &Tensor,
    model: &Model,
    config: &ExtractionConfig,
) -> Result<ImageFeatures, ExtractError> {
    config.validate()?;
    let global_params = GlobalHeadParams::from_store(&model.params, model.config.heads.gem_power)?;
    let attention = AttentionParams::from_store(&model.params)?;
    let autoencoder = AutoencoderParams::from_store(&model.params)?;
    let rf = receptive_field_of(Tap::Shallow, &model.config.backbone);
    let c_f = model.config.heads.global_dim;
    let c_t = model.config.heads.local_dim;

    let mut scales: Vec<f64> = config
        .global_scales
        .iter()
        .chain(&config.local_scales)
        .copied()
        .collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();

    let mut global_sum = vec![0.0; c_f];
    let mut global_used = 0;
    let mut candidates = Vec::new();
    for &scale in &scales {
        let is_global = config.global_scales.contains(&scale);
        let local_index = config.local_scales.iter().position(|&s| s == scale);
        let Some(maps) = scale_maps(model, image, scale, is_global)? else {
            log::debug!("scale {scale} skipped: image too small");
            continue;
        };
        if let Some(deep) = &maps.deep {
            let g = heads::global_descriptor(deep, &global_params)?;
            match unit(&g.data()[..c_f]) {
                Some(u) => {
                    global_sum.iter_mut().zip(&u).for_each(|(s, v)| *s += v);
                    global_used += 1;
                }
                None => log::debug!("scale {scale} dropped: near-zero global descriptor"),
            }
        }
        if let Some(scale_index) = local_index {
            let scores = heads::attention_scores(&maps.shallow, &attention)?;
            let encoded = heads::encode(&maps.shallow, &autoencoder)?;
            let (hs, ws) = (scores.shape()[1], scores.shape()[2]);
            for h in 0..hs {
                for w in 0..ws {
                    let score = scores.data()[h * ws + w] as f32;
                    if f64::from(score) < config.tau {
                        continue;
                    }
                    let at = (h * ws + w) * c_t;
                    let Some(descriptor) = unit(&encoded.data()[at..at + c_t]) else {
                        continue;
                    };
                    candidates.push(Candidate {
                        score,
                        scale_index,
                        h,
                        w,
                        descriptor,
                    });
                }
            }
        }
    }
    if global_used == 0 {
        return Err(ExtractError::NoGlobalScale);
    }
    let global = unit(&global_sum).ok_or(ExtractError::NoGlobalScale)?;

    candidates.sort_by(rank_candidates);
    candidates.truncate(config.max_local);
    let mut keypoints = Vec::with_capacity(candidates.len());
    let mut data = Vec::with_capacity(candidates.len() * c_t);
    for c in &candidates {
        let scale = config.local_scales[c.scale_index];
        let (x, y) = keypoint_center(c.h, c.w, &rf, scale);
        keypoints.push(Keypoint {
            x: x as f32,
            y: y as f32,
            scale: scale as f32,
            score: c.score,
        });
        data.extend(c.descriptor.iter().map(|&v| v as f32));
    }
    let mut local = LocalFeatures {
        keypoints,
        descriptors: Descriptors::Float { dim: c_t, data },
    };
    if config.binarize {
        local = local.binarized();
    }
    Ok(ImageFeatures {
        global: global.into_iter().map(|v| v as f32).collect(),
        local,
    })
}

/// Multi-scale global descriptor only.
pub fn extract_global(
    image: &Tensor,
    model: &Model,
    config: &ExtractionConfig,
) -> Result<Vec<f32>, ExtractError> {
    let config = ExtractionConfig {
        local_scales: Vec::new(),
        ..config.clone()
    };
    Ok(extract(image, model, &config)?.global)
}

/// Attention-selected local features only (the global descriptor is computed
/// at the configured global scales and discarded).
pub fn extract_local(
    image: &Tensor,
    model: &Model,
    config: &ExtractionConfig,
) -> Result<LocalFeatures, ExtractError> {
    Ok(extract(image, model, config)?.local)
}
