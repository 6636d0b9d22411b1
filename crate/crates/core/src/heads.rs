//! Global descriptor head (GeM + whitening), attention scorer, and the 1x1
//! convolutional autoencoder over the shallow map.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::{BackboneConfig, Tap};
use crate::model::{batched, Bound, ModelConfig, ModelError, ParamStore};
use crate::numgraph::{Graph, NodeId, Padding, Tensor};

pub const WHITEN_WEIGHT: &str = "global.whiten.weight";
pub const WHITEN_BIAS: &str = "global.whiten.bias";
pub const ATTENTION_CONV1_WEIGHT: &str = "attention.conv1.weight";
pub const ATTENTION_CONV1_BIAS: &str = "attention.conv1.bias";
pub const ATTENTION_CONV2_WEIGHT: &str = "attention.conv2.weight";
pub const ATTENTION_CONV2_BIAS: &str = "attention.conv2.bias";
pub const ENCODER_WEIGHT: &str = "autoencoder.encoder.weight";
pub const ENCODER_BIAS: &str = "autoencoder.encoder.bias";
pub const DECODER_WEIGHT: &str = "autoencoder.decoder.weight";
pub const DECODER_BIAS: &str = "autoencoder.decoder.bias";
pub const ARCFACE_WEIGHT: &str = "arcface.weight";
pub const ARCFACE_SCALE: &str = "arcface.scale";
pub const ATTENTION_CLASSIFIER_WEIGHT: &str = "attention_classifier.weight";
pub const ATTENTION_CLASSIFIER_BIAS: &str = "attention_classifier.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    /// C_F, the global descriptor dimension.
    pub global_dim: usize,
    /// C_T, the local descriptor dimension.
    pub local_dim: usize,
    pub attention_hidden: usize,
    /// GeM power; fixed, not learned.
    pub gem_power: f64,
    pub arcface_margin: f64,
}

impl HeadConfig {
    /// C_F = C_D, C_T = 16 and attention width C_S / 2.
    pub fn for_backbone(backbone: &BackboneConfig) -> Self {
        Self {
            global_dim: backbone.channels(Tap::Deep),
            local_dim: 16,
            attention_hidden: (backbone.channels(Tap::Shallow) / 2).max(1),
            gem_power: 3.0,
            arcface_margin: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.global_dim == 0 || self.local_dim == 0 || self.attention_hidden == 0 {
            return Err(ModelError::InvalidConfig("head widths must be >= 1".into()));
        }
        if !(self.gem_power >= 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "GeM power must be >= 1, got {}",
                self.gem_power
            )));
        }
        if !(self.arcface_margin >= 0.0) {
            return Err(ModelError::InvalidConfig("ArcFace margin must be >= 0".into()));
        }
        Ok(())
    }
}

fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
}

pub(crate) fn init_params(config: &ModelConfig, rng: &mut impl Rng, params: &mut ParamStore) {
    let h = &config.heads;
    let (cs, cd, k) = (
        config.shallow_channels(),
        config.deep_channels(),
        config.num_classes,
    );
    let inv_sqrt = |n: usize| (1.0 / n as f64).sqrt();

    params.insert(
        WHITEN_WEIGHT.into(),
        normal_tensor(rng, &[h.global_dim, cd], inv_sqrt(cd)),
    );
    params.insert(WHITEN_BIAS.into(), Tensor::zeros(&[h.global_dim]));

    params.insert(
        ATTENTION_CONV1_WEIGHT.into(),
        normal_tensor(rng, &[1, 1, cs, h.attention_hidden], (2.0 / cs as f64).sqrt()),
    );
    params.insert(ATTENTION_CONV1_BIAS.into(), Tensor::zeros(&[h.attention_hidden]));
    params.insert(
        ATTENTION_CONV2_WEIGHT.into(),
        normal_tensor(rng, &[1, 1, h.attention_hidden, 1], 0.1 * inv_sqrt(h.attention_hidden)),
    );
    params.insert(ATTENTION_CONV2_BIAS.into(), Tensor::zeros(&[1]));

    params.insert(
        ENCODER_WEIGHT.into(),
        normal_tensor(rng, &[1, 1, cs, h.local_dim], inv_sqrt(cs)),
    );
    params.insert(ENCODER_BIAS.into(), Tensor::zeros(&[h.local_dim]));
    params.insert(
        DECODER_WEIGHT.into(),
        normal_tensor(rng, &[1, 1, h.local_dim, cs], inv_sqrt(h.local_dim)),
    );
    params.insert(DECODER_BIAS.into(), Tensor::zeros(&[cs]));

    let mut w = normal_tensor(rng, &[k, h.global_dim], 1.0);
    normalize_rows(&mut w);
    params.insert(ARCFACE_WEIGHT.into(), w);
    params.insert(
        ARCFACE_SCALE.into(),
        Tensor::scalar((h.global_dim as f64).sqrt()),
    );

    params.insert(
        ATTENTION_CLASSIFIER_WEIGHT.into(),
        normal_tensor(rng, &[k, cs], 0.01),
    );
    params.insert(ATTENTION_CLASSIFIER_BIAS.into(), Tensor::zeros(&[k]));
}

/// Rescales each row of a matrix to unit L2 norm (zero rows are left alone).
pub fn normalize_rows(w: &mut Tensor) {
    let cols = *w.shape().last().expect("rank >= 1");
    for row in w.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// `g = F * GeM_p(D) + b_F` (not normalized). `d` is `[N,H,W,C_D]`; output `[N,C_F]`.
pub fn global_descriptor_node(
    g: &mut Graph,
    bound: &Bound,
    d: NodeId,
    power: f64,
) -> Result<NodeId, ModelError> {
    let pooled = g.gem_pool(d, power)?;
    Ok(g.fully_connected(pooled, bound.get(WHITEN_WEIGHT)?, Some(bound.get(WHITEN_BIAS)?))?)
}

fn pointwise(
    g: &mut Graph,
    bound: &Bound,
    x: NodeId,
    weight: &str,
    bias: &str,
) -> Result<NodeId, ModelError> {
    let y = g.conv2d(x, bound.get(weight)?, 1, Padding::Same)?;
    Ok(g.add_bias(y, bound.get(bias)?)?)
}

/// Strictly positive attention map `[N,H,W,1]` over `s`.
pub fn attention_scores_node(
    g: &mut Graph,
    bound: &Bound,
    s: NodeId,
) -> Result<NodeId, ModelError> {
    let hidden = pointwise(g, bound, s, ATTENTION_CONV1_WEIGHT, ATTENTION_CONV1_BIAS)?;
    let hidden = g.relu(hidden)?;
    let logits = pointwise(g, bound, hidden, ATTENTION_CONV2_WEIGHT, ATTENTION_CONV2_BIAS)?;
    Ok(g.softplus(logits)?)
}

/// Local descriptors L = T(S), no activation.
pub fn encode_node(g: &mut Graph, bound: &Bound, s: NodeId) -> Result<NodeId, ModelError> {
    pointwise(g, bound, s, ENCODER_WEIGHT, ENCODER_BIAS)
}

/// Reconstruction S' = ReLU(T'(L)).
pub fn decode_node(g: &mut Graph, bound: &Bound, l: NodeId) -> Result<NodeId, ModelError> {
    let y = pointwise(g, bound, l, DECODER_WEIGHT, DECODER_BIAS)?;
    Ok(g.relu(y)?)
}

fn bind_constants(g: &mut Graph, entries: &[(&str, &Tensor)]) -> Result<Bound, ModelError> {
    let store: BTreeMap<String, Tensor> = entries
        .iter()
        .map(|(k, v)| (k.to_string(), (*v).clone()))
        .collect();
    Bound::constants(g, &store, "")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHeadParams {
    /// F, `[C_F, C_D]`.
    pub whitening: Tensor,
    /// b_F, `[C_F]`.
    pub bias: Tensor,
    pub power: f64,
}

impl GlobalHeadParams {
    pub fn from_store(store: &ParamStore, power: f64) -> Result<Self, ModelError> {
        Ok(Self {
            whitening: get(store, WHITEN_WEIGHT)?.clone(),
            bias: get(store, WHITEN_BIAS)?.clone(),
            power,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

impl AttentionParams {
    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        Ok(Self {
            conv1_weight: get(store, ATTENTION_CONV1_WEIGHT)?.clone(),
            conv1_bias: get(store, ATTENTION_CONV1_BIAS)?.clone(),
            conv2_weight: get(store, ATTENTION_CONV2_WEIGHT)?.clone(),
            conv2_bias: get(store, ATTENTION_CONV2_BIAS)?.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderParams {
    pub encoder_weight: Tensor,
    pub encoder_bias: Tensor,
    pub decoder_weight: Tensor,
    pub decoder_bias: Tensor,
}

impl AutoencoderParams {
    pub fn from_store(store: &ParamStore) -> Result<Self, ModelError> {
        Ok(Self {
            encoder_weight: get(store, ENCODER_WEIGHT)?.clone(),
            encoder_bias: get(store, ENCODER_BIAS)?.clone(),
            decoder_weight: get(store, DECODER_WEIGHT)?.clone(),
            decoder_bias: get(store, DECODER_BIAS)?.clone(),
        })
    }
}

fn get<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor, ModelError> {
    store
        .get(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

/// Drops the leading batch axis again when the input had none.
fn unbatch(out: Tensor, input_rank: usize) -> Result<Tensor, ModelError> {
    if input_rank == 4 {
        return Ok(out);
    }
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(shape)?)
}

/// Tensor-level global head over `[H,W,C_D]` (or batched) maps.
pub fn global_descriptor(d: &Tensor, params: &GlobalHeadParams) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = bind_constants(
        &mut g,
        &[(WHITEN_WEIGHT, &params.whitening), (WHITEN_BIAS, &params.bias)],
    )?;
    let x = g.constant(batched(d)?)?;
    let out = global_descriptor_node(&mut g, &bound, x, params.power)?;
    unbatch(g.value(out).clone(), d.rank())
}

/// Tensor-level attention map. `[H,W,C_S]` input gives `[H,W,1]`.
pub fn attention_scores(s: &Tensor, params: &AttentionParams) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = bind_constants(
        &mut g,
        &[
            (ATTENTION_CONV1_WEIGHT, &params.conv1_weight),
            (ATTENTION_CONV1_BIAS, &params.conv1_bias),
            (ATTENTION_CONV2_WEIGHT, &params.conv2_weight),
            (ATTENTION_CONV2_BIAS, &params.conv2_bias),
        ],
    )?;
    let x = g.constant(batched(s)?)?;
    let out = attention_scores_node(&mut g, &bound, x)?;
    unbatch(g.value(out).clone(), s.rank())
}

fn autoencoder_bound(g: &mut Graph, params: &AutoencoderParams) -> Result<Bound, ModelError> {
    bind_constants(
        g,
        &[
            (ENCODER_WEIGHT, &params.encoder_weight),
            (ENCODER_BIAS, &params.encoder_bias),
            (DECODER_WEIGHT, &params.decoder_weight),
            (DECODER_BIAS, &params.decoder_bias),
        ],
    )
}

pub fn encode(s: &Tensor, params: &AutoencoderParams) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = autoencoder_bound(&mut g, params)?;
    let x = g.constant(batched(s)?)?;
    let out = encode_node(&mut g, &bound, x)?;
    unbatch(g.value(out).clone(), s.rank())
}

pub fn decode(l: &Tensor, params: &AutoencoderParams) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let bound = autoencoder_bound(&mut g, params)?;
    let x = g.constant(batched(l)?)?;
    let out = decode_node(&mut g, &bound, x)?;
    unbatch(g.value(out).clone(), l.rank())
}
