//! Residual convolutional backbone with a shallow and a deep tap point, plus the
//! receptive-field arithmetic that maps feature-map cells back to image pixels.

use crate::model::{Bound, ModelError, ParamStore};
use crate::numgraph::{Graph, NodeId, Padding, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// One convolution of the backbone, always followed by ReLU.
///
/// With `residual` set, the layer input is added to the convolution output
/// before the ReLU; this requires stride 1 and unchanged channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub residual: bool,
}

impl LayerSpec {
    pub const fn new(kernel: usize, out_channels: usize, stride: usize, residual: bool) -> Self {
        Self {
            kernel,
            out_channels,
            stride,
            residual,
        }
    }

    /// Zero rows/cols added before the first input row under same padding.
    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output is the shallow map S.
    pub tap_shallow: usize,
    /// Index of the layer whose output is the deep map D.
    pub tap_deep: usize,
    /// Nominal training image side in pixels.
    pub input_size: usize,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    /// Four stages of two convolutions: S after stage three (stride 8, 64
    /// channels) and D after stage four (stride 16, 128 channels).
    fn default() -> Self {
        Self {
            layers: vec![
                LayerSpec::new(3, 8, 2, false),
                LayerSpec::new(3, 8, 1, true),
                LayerSpec::new(3, 16, 2, false),
                LayerSpec::new(3, 16, 1, true),
                LayerSpec::new(3, 64, 2, false),
                LayerSpec::new(3, 64, 1, true),
                LayerSpec::new(3, 128, 2, false),
                LayerSpec::new(1, 128, 1, true),
            ],
            tap_shallow: 5,
            tap_deep: 7,
            input_size: 64,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.tap_shallow >= self.tap_deep || self.tap_deep >= self.layers.len() {
            return bad(format!(
                "taps must satisfy shallow < deep < {} (got {} and {})",
                self.layers.len(),
                self.tap_shallow,
                self.tap_deep
            ));
        }
        let mut channels = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.out_channels == 0 {
                return bad(format!("layer {i}: kernel, stride and channels must be >= 1"));
            }
            if l.residual && (l.stride != 1 || l.out_channels != channels) {
                return bad(format!(
                    "layer {i}: residual layers need stride 1 and {channels} output channels"
                ));
            }
            channels = l.out_channels;
        }
        if self.channels(Tap::Deep) < self.channels(Tap::Shallow) {
            return bad("deep map must have at least as many channels as the shallow map".into());
        }
        Ok(())
    }

    pub fn tap_index(&self, tap: Tap) -> usize {
        match tap {
            Tap::Shallow => self.tap_shallow,
            Tap::Deep => self.tap_deep,
        }
    }

    pub fn channels(&self, tap: Tap) -> usize {
        self.layers[self.tap_index(tap)].out_channels
    }

    /// Total downsampling factor at a tap.
    pub fn stride(&self, tap: Tap) -> usize {
        self.layers[..=self.tap_index(tap)]
            .iter()
            .map(|l| l.stride)
            .product()
    }

    /// Spatial side of a tap output for an input of side `side`.
    pub fn output_side(&self, tap: Tap, side: usize) -> usize {
        self.layers[..=self.tap_index(tap)]
            .iter()
            .fold(side, |s, l| s.div_ceil(l.stride))
    }

    /// Smallest accepted image side: the deep tap's total stride.
    pub fn min_side(&self) -> usize {
        self.stride(Tap::Deep)
    }

    pub fn receptive_field(&self, tap: Tap) -> ReceptiveField {
        self.layers[..=self.tap_index(tap)]
            .iter()
            .fold(ReceptiveField::IDENTITY, |rf, l| {
                rf.compose(l.kernel, l.stride, l.padding())
            })
    }
}

/// Receptive field of a feature-map cell in input pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReceptiveField {
    pub size: usize,
    pub effective_stride: usize,
    pub effective_padding: usize,
}

impl ReceptiveField {
    pub const IDENTITY: Self = Self {
        size: 1,
        effective_stride: 1,
        effective_padding: 0,
    };

    /// Appends a layer with kernel `k`, stride `s` and leading padding `p`.
    pub fn compose(self, k: usize, s: usize, p: usize) -> Self {
        Self {
            size: self.size + (k - 1) * self.effective_stride,
            effective_stride: self.effective_stride * s,
            effective_padding: self.effective_padding + p * self.effective_stride,
        }
    }

    /// Inclusive pixel range `[first, last]` covered by output index `i` along one axis.
    pub fn span(&self, i: usize) -> (isize, isize) {
        let first = (self.effective_stride * i) as isize - self.effective_padding as isize;
        (first, first + self.size as isize - 1)
    }
}

pub fn receptive_field_of(tap: Tap, config: &BackboneConfig) -> ReceptiveField {
    config.receptive_field(tap)
}

/// Image-space centre `(x, y)` of feature cell `(h, w)` at pyramid scale
/// `image_scale`, in original-image pixels (x from the column `w`, y from the row `h`).
pub fn keypoint_center(h: usize, w: usize, rf: &ReceptiveField, image_scale: f64) -> (f64, f64) {
    assert!(image_scale > 0.0, "image scale must be positive");
    let offset = (rf.size as f64 - 1.0) / 2.0 - rf.effective_padding as f64;
    let stride = rf.effective_stride as f64;
    (
        (stride * w as f64 + offset) / image_scale,
        (stride * h as f64 + offset) / image_scale,
    )
}

/// Shallow (S) and deep (D) activation maps, NHWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub shallow: Tensor,
    pub deep: Tensor,
}

pub(crate) fn weight_name(layer: usize) -> String {
    format!("backbone.conv{layer}.weight")
}

pub(crate) fn bias_name(layer: usize) -> String {
    format!("backbone.conv{layer}.bias")
}

/// He-normal kernels and zero biases.
pub(crate) fn init_params(config: &BackboneConfig, rng: &mut impl Rng, params: &mut ParamStore) {
    let mut cin = config.in_channels;
    for (i, l) in config.layers.iter().enumerate() {
        let fan_in = l.kernel * l.kernel * cin;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let n = fan_in * l.out_channels;
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        params.insert(
            weight_name(i),
            Tensor::new(vec![l.kernel, l.kernel, cin, l.out_channels], data).expect("shape"),
        );
        params.insert(bias_name(i), Tensor::zeros(&[l.out_channels]));
        cin = l.out_channels;
    }
}

fn check_image(config: &BackboneConfig, shape: &[usize]) -> Result<(), ModelError> {
    if shape.len() != 4 || shape[3] != config.in_channels {
        return Err(ModelError::InvalidInput(format!(
            "expected image batch [N,H,W,{}], got {shape:?}",
            config.in_channels
        )));
    }
    let side = shape[1].min(shape[2]);
    if side < config.min_side() {
        return Err(ModelError::ImageTooSmall {
            side,
            min_side: config.min_side(),
        });
    }
    Ok(())
}

/// Runs layers `0..=last` on `image` ([N,H,W,C]) and returns every layer output.
pub fn forward_layers(
    g: &mut Graph,
    config: &BackboneConfig,
    bound: &Bound,
    image: NodeId,
    last: usize,
) -> Result<Vec<NodeId>, ModelError> {
    check_image(config, g.value(image).shape())?;
    let mut x = image;
    let mut outputs = Vec::with_capacity(last + 1);
    for (i, l) in config.layers.iter().enumerate().take(last + 1) {
        let y = g.conv2d(x, bound.get(&weight_name(i))?, l.stride, Padding::Same)?;
        let mut y = g.add_bias(y, bound.get(&bias_name(i))?)?;
        if l.residual {
            y = g.add(y, x)?;
        }
        x = g.relu(y)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Graph nodes of S and D for a batch of images.
pub fn forward(
    g: &mut Graph,
    config: &BackboneConfig,
    bound: &Bound,
    image: NodeId,
) -> Result<(NodeId, NodeId), ModelError> {
    let outs = forward_layers(g, config, bound, image, config.tap_deep)?;
    Ok((outs[config.tap_shallow], outs[config.tap_deep]))
}

/// Inference-only forward pass over an `[H,W,C]` or `[N,H,W,C]` image tensor.
pub fn extract_maps(
    config: &BackboneConfig,
    params: &ParamStore,
    image: &Tensor,
) -> Result<FeatureMaps, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, params, "backbone.")?;
    let image = g.constant(crate::model::batched(image)?)?;
    let (s, d) = forward(&mut g, config, &bound, image)?;
    Ok(FeatureMaps {
        shallow: g.value(s).clone(),
        deep: g.value(d).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_base_cases() {
        let one = ReceptiveField::IDENTITY.compose(1, 1, 0);
        assert_eq!(one, ReceptiveField::IDENTITY);
        let rf = ReceptiveField::IDENTITY.compose(3, 2, 1);
        assert_eq!((rf.size, rf.effective_stride, rf.effective_padding), (3, 2, 1));
        let rf = rf.compose(3, 2, 1);
        assert_eq!((rf.size, rf.effective_stride, rf.effective_padding), (7, 4, 3));
    }

    #[test]
    fn keypoint_center_examples() {
        assert_eq!(keypoint_center(3, 5, &ReceptiveField::IDENTITY, 1.0), (5.0, 3.0));
        let rf = ReceptiveField {
            size: 3,
            effective_stride: 2,
            effective_padding: 1,
        };
        assert_eq!(keypoint_center(0, 0, &rf, 1.0), (0.0, 0.0));
        let (x1, y1) = keypoint_center(4, 7, &rf, 1.0);
        let (x2, y2) = keypoint_center(4, 7, &rf, 2.0);
        assert_eq!((x2, y2), (x1 / 2.0, y1 / 2.0));
    }

    #[test]
    fn default_config_is_valid() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stride(Tap::Shallow), 8);
        assert_eq!(c.stride(Tap::Deep), 16);
        assert_eq!(c.channels(Tap::Shallow), 64);
        assert_eq!(c.channels(Tap::Deep), 128);
        assert_eq!(c.output_side(Tap::Shallow, 64), 8);
        assert_eq!(c.output_side(Tap::Deep, 64), 4);
    }

    #[test]
    fn validate_rejects_bad_taps_and_residuals() {
        let mut c = BackboneConfig::default();
        c.tap_shallow = 7;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.layers[2].residual = true;
        assert!(c.validate().is_err());
    }
}
