/// Inputs to `acos` are clamped to `[-1 + ACOS_CLAMP, 1 - ACOS_CLAMP]`.
pub const ACOS_CLAMP: f64 = 1e-7;

/// Additive angular margin on a cosine similarity.
///
/// Non-target entries pass through; the target entry becomes `cos(acos(u) + m)`.
pub fn arcface_adjust(u: f64, is_target: bool, margin: f64) -> f64 {
    if !is_target || margin == 0.0 {
        return u;
    }
    let u = u.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
    (u.acos() + margin).cos()
}

/// d/du of the target branch of [`arcface_adjust`]; zero where the clamp is active.
pub(crate) fn arcface_adjust_derivative(u: f64, margin: f64) -> f64 {
    if margin == 0.0 {
        return 1.0;
    }
    if u <= -1.0 + ACOS_CLAMP || u >= 1.0 - ACOS_CLAMP {
        return 0.0;
    }
    (u.acos() + margin).sin() / (1.0 - u * u).sqrt()
}

use crate::backbone;
use crate::heads::{self, ARCFACE_SCALE, ARCFACE_WEIGHT};
use crate::heads::{ATTENTION_CLASSIFIER_BIAS, ATTENTION_CLASSIFIER_WEIGHT};
use crate::model::{Bound, ModelConfig, ModelError};
use crate::numgraph::{Graph, NodeId, Tensor};

/// Cosine classifier with additive angular margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceClassifier {
    /// `[num_classes, C_F]`; rows are normalized inside the loss.
    pub weight: Tensor,
    pub margin: f64,
    /// Learnable logit scale γ.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionClassifier {
    /// `[num_classes, C_S]`.
    pub weight: Tensor,
    /// `[num_classes]`.
    pub bias: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    /// Weight of the attention loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn has_local_terms(&self) -> bool {
        self.lambda != 0.0 || self.beta != 0.0
    }
}

/// Whether the local-feature losses may back-propagate into the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientControl {
    /// L_r and L_a read S through a stop-gradient barrier.
    StopGradients,
    Naive,
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_index(y: &[f64]) -> Result<usize, ModelError> {
    let ones: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1.0).collect();
    let valid = ones.len() == 1 && y.iter().all(|&v| v == 0.0 || v == 1.0);
    if !valid {
        return Err(ModelError::InvalidInput(format!("not a one-hot vector: {y:?}")));
    }
    Ok(ones[0])
}

/// ArcFace softmax cross-entropy over `g_hat` (`[C_F]` or `[N,C_F]`).
pub fn global_loss_node(
    g: &mut Graph,
    g_hat: NodeId,
    weight: NodeId,
    scale: NodeId,
    targets: &[usize],
    margin: f64,
) -> Result<NodeId, ModelError> {
    let w_hat = g.l2_normalize(weight)?;
    let cosines = g.matmul_t(g_hat, w_hat)?;
    let adjusted = g.arcface_margin(cosines, targets, margin)?;
    let logits = g.scale_by(adjusted, scale)?;
    Ok(g.softmax_cross_entropy(logits, targets)?)
}

/// Softmax cross-entropy of `v^T a' + b` (`a'` is `[C_S]` or `[N,C_S]`).
pub fn attention_loss_node(
    g: &mut Graph,
    pooled: NodeId,
    weight: NodeId,
    bias: NodeId,
    targets: &[usize],
) -> Result<NodeId, ModelError> {
    let logits = g.fully_connected(pooled, weight, Some(bias))?;
    Ok(g.softmax_cross_entropy(logits, targets)?)
}

/// L_g for a single unit-norm descriptor and one-hot label.
pub fn global_loss(g_hat: &Tensor, y: &[f64], clf: &ArcFaceClassifier) -> Result<f64, ModelError> {
    let target = one_hot_index(y)?;
    let classes = clf.weight.shape()[0];
    if y.len() != classes {
        return Err(ModelError::InvalidInput(format!(
            "one-hot label has {} entries for {classes} classes",
            y.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(g_hat.clone())?;
    let w = g.constant(clf.weight.clone())?;
    let s = g.constant(Tensor::scalar(clf.scale))?;
    let loss = global_loss_node(&mut g, x, w, s, &[target], clf.margin)?;
    Ok(g.value(loss).data()[0])
}

/// L_r: mean squared error normalized by H * W * C (and batch size).
pub fn reconstruction_loss(s_prime: &Tensor, s: &Tensor) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(s_prime.clone())?, g.constant(s.clone())?);
    let loss = g.mean_squared_error(a, b)?;
    Ok(g.value(loss).data()[0])
}

/// a' = sum over positions of attention-weighted reconstructed features.
pub fn attention_pool(s_prime: &Tensor, attention: &Tensor) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let (f, a) = (g.constant(s_prime.clone())?, g.constant(attention.clone())?);
    let out = g.attention_pool(f, a)?;
    Ok(g.value(out).clone())
}

pub fn attention_loss(
    pooled: &Tensor,
    class: usize,
    clf: &AttentionClassifier,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let a = g.constant(pooled.clone())?;
    let w = g.constant(clf.weight.clone())?;
    let b = g.constant(clf.bias.clone())?;
    let loss = attention_loss_node(&mut g, a, w, b, &[class])?;
    Ok(g.value(loss).data()[0])
}

/// Graph nodes of one forward pass through the full training objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub shallow: NodeId,
    pub deep: NodeId,
    pub global: NodeId,
    pub reconstruction: Option<NodeId>,
    pub attention: Option<NodeId>,
    /// Attention map `[N,H_S,W_S,1]` when local terms were built.
    pub attention_map: Option<NodeId>,
}

impl LossTerms {
    /// `global_weight * L_g + lambda * L_r + beta * L_a`.
    pub fn combine(
        &self,
        g: &mut Graph,
        global_weight: f64,
        weights: LossWeights,
    ) -> Result<NodeId, ModelError> {
        let mut total = if global_weight == 1.0 {
            self.global
        } else {
            g.scale(self.global, global_weight)?
        };
        for (term, w) in [
            (self.reconstruction, weights.lambda),
            (self.attention, weights.beta),
        ] {
            if let Some(term) = term {
                let scaled = g.scale(term, w)?;
                total = g.add(total, scaled)?;
            }
        }
        Ok(total)
    }
}

/// Builds L_g and, when `local` is set, L_r and L_a for a batch of images
/// (`[N,H,W,3]`) with class labels `targets`.
pub fn build_losses(
    g: &mut Graph,
    config: &ModelConfig,
    bound: &Bound,
    images: NodeId,
    targets: &[usize],
    control: GradientControl,
    local: bool,
) -> Result<LossTerms, ModelError> {
    let (shallow, deep) = backbone::forward(g, &config.backbone, bound, images)?;

    let raw = heads::global_descriptor_node(g, bound, deep, config.heads.gem_power)?;
    let g_hat = g.l2_normalize(raw)?;
    let global = global_loss_node(
        g,
        g_hat,
        bound.get(ARCFACE_WEIGHT)?,
        bound.get(ARCFACE_SCALE)?,
        targets,
        config.heads.arcface_margin,
    )?;

    let mut terms = LossTerms {
        shallow,
        deep,
        global,
        reconstruction: None,
        attention: None,
        attention_map: None,
    };
    if !local {
        return Ok(terms);
    }

    let s = match control {
        GradientControl::StopGradients => g.stop_gradient(shallow)?,
        GradientControl::Naive => shallow,
    };
    let attention = heads::attention_scores_node(g, bound, s)?;
    let encoded = heads::encode_node(g, bound, s)?;
    let reconstructed = heads::decode_node(g, bound, encoded)?;
    terms.reconstruction = Some(g.mean_squared_error(reconstructed, s)?);
    let pooled = g.attention_pool(reconstructed, attention)?;
    terms.attention = Some(attention_loss_node(
        g,
        pooled,
        bound.get(ATTENTION_CLASSIFIER_WEIGHT)?,
        bound.get(ATTENTION_CLASSIFIER_BIAS)?,
        targets,
    )?);
    terms.attention_map = Some(attention);
    Ok(terms)
}

/// `L_g + lambda * L_r + beta * L_a`; local terms are skipped when both weights are zero.
pub fn total_loss(
    g: &mut Graph,
    config: &ModelConfig,
    bound: &Bound,
    images: NodeId,
    targets: &[usize],
    weights: LossWeights,
    control: GradientControl,
) -> Result<(NodeId, LossTerms), ModelError> {
    let terms = build_losses(
        g,
        config,
        bound,
        images,
        targets,
        control,
        weights.has_local_terms(),
    )?;
    let total = terms.combine(g, 1.0, weights)?;
    Ok((total, terms))
}
