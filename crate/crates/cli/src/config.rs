//! TOML run configuration. Every section and key is optional; missing values
//! take the library defaults and unknown keys are rejected.

use std::path::Path;

use delg::backbone::{BackboneConfig, LayerSpec};
use delg::extractor::ExtractionConfig;
use delg::heads::HeadConfig;
use delg::losses::{GradientControl, LossWeights};
use delg::matcher::{MatchConfig, MatchMode};
use delg::retrieval::{RecognitionConfig, SHORTLIST};
use delg::trainer::{SynthSpec, TrainConfig};
use delg::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthSection,
    pub backbone: BackboneSection,
    pub heads: HeadsSection,
    pub train: TrainSection,
    pub extract: ExtractSection,
    #[serde(rename = "match")]
    pub matching: MatchSection,
    pub retrieval: RetrievalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let heads = HeadConfig::for_backbone(&backbone);
        Self {
            synth: SynthSpec::default().into(),
            backbone: backbone.into(),
            heads: heads.into(),
            train: TrainConfig::default().into(),
            extract: ExtractSection::default(),
            matching: MatchConfig::default().into(),
            retrieval: RetrievalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model_config(&self, num_classes: usize) -> Result<ModelConfig, CliError> {
        let config = ModelConfig {
            backbone: self.backbone.clone().into(),
            heads: self.heads.clone().into(),
            num_classes,
        };
        config.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub rotation_deg: f64,
    pub scale_range: [f64; 2],
    pub translation: f64,
    pub brightness: f64,
    pub contrast_range: [f64; 2],
    pub clutter_density: f64,
    pub glyph_count: [usize; 2],
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSpec::default().into()
    }
}

impl From<SynthSpec> for SynthSection {
    fn from(s: SynthSpec) -> Self {
        Self {
            classes: s.num_classes,
            images_per_class: s.images_per_class,
            image_size: s.image_size,
            rotation_deg: s.rotation_deg,
            scale_range: [s.scale_range.0, s.scale_range.1],
            translation: s.translation,
            brightness: s.brightness,
            contrast_range: [s.contrast_range.0, s.contrast_range.1],
            clutter_density: s.clutter_density,
            glyph_count: [s.glyph_count.0, s.glyph_count.1],
        }
    }
}

impl From<SynthSection> for SynthSpec {
    fn from(s: SynthSection) -> Self {
        Self {
            num_classes: s.classes,
            images_per_class: s.images_per_class,
            image_size: s.image_size,
            rotation_deg: s.rotation_deg,
            scale_range: (s.scale_range[0], s.scale_range[1]),
            translation: s.translation,
            brightness: s.brightness,
            contrast_range: (s.contrast_range[0], s.contrast_range[1]),
            clutter_density: s.clutter_density,
            glyph_count: (s.glyph_count[0], s.glyph_count[1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSection {
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    #[serde(default)]
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub tap_shallow: usize,
    pub tap_deep: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub layers: Vec<LayerSection>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneConfig::default().into()
    }
}

impl From<BackboneConfig> for BackboneSection {
    fn from(b: BackboneConfig) -> Self {
        Self {
            tap_shallow: b.tap_shallow,
            tap_deep: b.tap_deep,
            input_size: b.input_size,
            in_channels: b.in_channels,
            layers: b
                .layers
                .iter()
                .map(|l| LayerSection {
                    kernel: l.kernel,
                    out_channels: l.out_channels,
                    stride: l.stride,
                    residual: l.residual,
                })
                .collect(),
        }
    }
}

impl From<BackboneSection> for BackboneConfig {
    fn from(b: BackboneSection) -> Self {
        Self {
            layers: b
                .layers
                .iter()
                .map(|l| LayerSpec::new(l.kernel, l.out_channels, l.stride, l.residual))
                .collect(),
            tap_shallow: b.tap_shallow,
            tap_deep: b.tap_deep,
            input_size: b.input_size,
            in_channels: b.in_channels,
        }
    }
}

/// Head widths; the ArcFace margin lives in `[train]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsSection {
    pub global_dim: usize,
    pub local_dim: usize,
    pub attention_hidden: usize,
    pub gem_power: f64,
}

impl Default for HeadsSection {
    fn default() -> Self {
        HeadConfig::for_backbone(&BackboneConfig::default()).into()
    }
}

impl From<HeadConfig> for HeadsSection {
    fn from(h: HeadConfig) -> Self {
        Self {
            global_dim: h.global_dim,
            local_dim: h.local_dim,
            attention_hidden: h.attention_hidden,
            gem_power: h.gem_power,
        }
    }
}

impl From<HeadsSection> for HeadConfig {
    fn from(h: HeadsSection) -> Self {
        Self {
            global_dim: h.global_dim,
            local_dim: h.local_dim,
            attention_hidden: h.attention_hidden,
            gem_power: h.gem_power,
            arcface_margin: TrainConfig::default().margin,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Control {
    Stop,
    Naive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    /// Weight of the reconstruction loss.
    pub lambda: f64,
    /// Weight of the attention loss.
    pub beta: f64,
    pub control: Control,
    pub seed: u64,
    pub margin: f64,
    pub eval_every: usize,
    /// Per-branch gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainConfig::default().into()
    }
}

impl From<TrainConfig> for TrainSection {
    fn from(t: TrainConfig) -> Self {
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            momentum: t.momentum,
            lambda: t.weights.lambda,
            beta: t.weights.beta,
            control: match t.control {
                GradientControl::StopGradients => Control::Stop,
                GradientControl::Naive => Control::Naive,
            },
            seed: t.seed,
            margin: t.margin,
            eval_every: t.eval_every,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

impl From<TrainSection> for TrainConfig {
    fn from(t: TrainSection) -> Self {
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            momentum: t.momentum,
            weights: LossWeights {
                lambda: t.lambda,
                beta: t.beta,
            },
            control: match t.control {
                Control::Stop => GradientControl::StopGradients,
                Control::Naive => GradientControl::Naive,
            },
            seed: t.seed,
            margin: t.margin,
            eval_every: t.eval_every,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub global_scales: Vec<f64>,
    pub local_scales: Vec<f64>,
    pub max_local: usize,
    /// Percentile of the checkpointed attention sample used by `--tau auto`.
    pub tau_percentile: f64,
    pub binarize: bool,
}

impl Default for ExtractSection {
    fn default() -> Self {
        let e = ExtractionConfig::default();
        Self {
            global_scales: e.global_scales,
            local_scales: e.local_scales,
            max_local: e.max_local,
            tau_percentile: delg::benchmark::TAU_PERCENTILE,
            binarize: e.binarize,
        }
    }
}

impl ExtractSection {
    pub fn extraction_config(&self, tau: f64) -> ExtractionConfig {
        ExtractionConfig {
            global_scales: self.global_scales.clone(),
            local_scales: self.local_scales.clone(),
            max_local: self.max_local,
            tau,
            binarize: self.binarize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ratio,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub mode: Mode,
    pub ratio_threshold: f64,
    pub distance_threshold: f64,
    pub ransac_iters: usize,
    pub residual_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for MatchSection {
    fn default() -> Self {
        MatchConfig::default().into()
    }
}

impl From<MatchConfig> for MatchSection {
    fn from(m: MatchConfig) -> Self {
        Self {
            mode: match m.mode {
                MatchMode::Ratio => Mode::Ratio,
                MatchMode::Distance => Mode::Distance,
            },
            ratio_threshold: m.ratio_threshold,
            distance_threshold: m.distance_threshold,
            ransac_iters: m.ransac_iters,
            residual_threshold: m.residual_threshold,
            min_inliers: m.min_inliers,
            seed: m.rng_seed,
        }
    }
}

impl From<MatchSection> for MatchConfig {
    fn from(m: MatchSection) -> Self {
        Self {
            mode: match m.mode {
                Mode::Ratio => MatchMode::Ratio,
                Mode::Distance => MatchMode::Distance,
            },
            ratio_threshold: m.ratio_threshold,
            distance_threshold: m.distance_threshold,
            ransac_iters: m.ransac_iters,
            residual_threshold: m.residual_threshold,
            min_inliers: m.min_inliers,
            rng_seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub shortlist: usize,
    pub alpha: f64,
    pub top_k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        let r = RecognitionConfig::default();
        Self {
            shortlist: SHORTLIST,
            alpha: r.alpha,
            top_k: r.top_k,
        }
    }
}

impl RetrievalSection {
    pub fn recognition(&self) -> RecognitionConfig {
        RecognitionConfig {
            alpha: self.alpha,
            top_k: self.top_k,
        }
    }
}
