//! Training loop, activation-sparsity monitoring and attention-threshold
//! selection, plus the synthetic corpus the loop trains on.

mod optim;
pub mod synth;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::FeatureMaps;
use crate::heads::{self, ARCFACE_WEIGHT};
use crate::losses::{self, GradientControl, LossWeights};
use crate::model::{Bound, Model, ModelConfig, ModelError};
use crate::numgraph::{Graph, GraphError, Tensor};

pub use optim::{linear_decay, Sgd};
pub use synth::{generate_dataset, Dataset, Sample, SynthSpec};

/// Extra key under which the final attention-score sample is checkpointed.
pub const ATTENTION_SAMPLE: &str = "attention_scores";
const PROBE_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_good: Box<Model> },
    #[error("percentile of an empty score sample")]
    EmptySample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub control: GradientControl,
    pub seed: u64,
    /// ArcFace margin m.
    pub margin: f64,
    pub eval_every: usize,
    /// Per-branch gradient L2 norm cap applied before each update.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr_init: 0.02,
            momentum: 0.9,
            weights: LossWeights::default(),
            control: GradientControl::StopGradients,
            seed: 0,
            margin: 0.1,
            eval_every: 100,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be >= 1");
        }
        if !(self.lr_init >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("need lr_init >= 0 and momentum in [0, 1)");
        }
        if !(self.weights.lambda >= 0.0 && self.weights.beta >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be >= 0");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be > 0");
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        linear_decay(self.lr_init, step, self.steps)
    }
}

/// One row of the training trace, evaluated on a fixed probe batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss_g: f64,
    pub loss_r: f64,
    pub loss_a: f64,
    pub sparsity_s: f64,
    pub sparsity_d: f64,
    pub lr: f64,
}

pub type SparsityTrace = Vec<TraceRow>;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub trace: SparsityTrace,
    /// Attention scores of the final training batch, the sample for τ.
    pub attention_sample: Vec<f64>,
}

/// Fraction of exactly-zero entries in S and in D.
pub fn measure_sparsity(maps: &FeatureMaps) -> (f64, f64) {
    (zero_fraction(&maps.shallow), zero_fraction(&maps.deep))
}

pub fn zero_fraction(t: &Tensor) -> f64 {
    t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.numel() as f64
}

/// Percentile (0-100) by full sort with linear interpolation between order
/// statistics, so the median of an even-sized sample is the midpoint.
pub fn compute_tau(scores: &[f64], percentile: f64) -> Result<f64, TrainError> {
    if scores.is_empty() {
        return Err(TrainError::EmptySample);
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(TrainError::InvalidConfig(format!(
            "percentile {percentile} outside [0, 100]"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// The model a training run with `config` starts from.
/// Freshly initialized model; the ArcFace margin is taken from `config`.
pub fn initial_model(config: &TrainConfig, model: &ModelConfig) -> Result<Model, ModelError> {
    let mut model_config = model.clone();
    model_config.heads.arcface_margin = config.margin;
    Model::init(model_config, config.seed)
}

/// Stacks `[H,W,C]` images into one `[N,H,W,C]` batch.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor, ModelError> {
    let images: Vec<&Tensor> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| ModelError::InvalidInput("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in &images {
        if img.shape() != first.shape() {
            return Err(ModelError::InvalidInput(format!(
                "batch images differ in shape: {:?} vs {:?}",
                img.shape(),
                first.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Ok(Tensor::new(shape, data).map_err(ModelError::from)?)
}

/// Forward-only losses and sparsity on a fixed batch.
fn evaluate(
    model: &Model,
    images: &Tensor,
    labels: &[usize],
    control: GradientControl,
) -> Result<(f64, f64, f64, f64, f64), ModelError> {
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, &model.params, "")?;
    let x = g.constant(images.clone())?;
    let terms = losses::build_losses(&mut g, &model.config, &bound, x, labels, control, true)?;
    let value = |id| g.value(id).data()[0];
    Ok((
        value(terms.global),
        terms.reconstruction.map(value).unwrap_or(0.0),
        terms.attention.map(value).unwrap_or(0.0),
        zero_fraction(g.value(terms.shallow)),
        zero_fraction(g.value(terms.deep)),
    ))
}

fn attention_sample(model: &Model, images: &Tensor) -> Result<Vec<f64>, ModelError> {
    let mut g = Graph::new();
    let bound = Bound::constants(&mut g, &model.params, "")?;
    let x = g.constant(images.clone())?;
    let (s, _) = crate::backbone::forward(&mut g, &model.config.backbone, &bound, x)?;
    let a = heads::attention_scores_node(&mut g, &bound, s)?;
    Ok(g.value(a).data().to_vec())
}

fn is_non_finite(err: &ModelError) -> bool {
    matches!(err, ModelError::Graph(GraphError::NonFinite { .. }))
}

/// Runs SGD with momentum and linear learning-rate decay on `dataset.train`.
///
/// Deterministic for a fixed seed: batches come from a seeded per-epoch
/// shuffle and the loop is single-threaded.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(TrainError::InvalidConfig("empty training split".into()));
    }
    if model.num_classes != dataset.num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "model has {} classes, dataset has {}",
            model.num_classes, dataset.num_classes
        )));
    }
    let mut model = initial_model(config, model)?;
    info!(
        "training {} parameters for {} steps ({:?}, lambda={}, beta={})",
        model.num_parameters(),
        config.steps,
        config.control,
        config.weights.lambda,
        config.weights.beta
    );

    let probe: Vec<&Sample> = dataset.train.iter().take(PROBE_SIZE).collect();
    let probe_images = stack_images(probe.iter().map(|s| &s.image))?;
    let probe_labels: Vec<usize> = probe.iter().map(|s| s.label).collect();

    let mut trace = Vec::new();
    let record = |model: &Model, step: usize, trace: &mut SparsityTrace| {
        let (loss_g, loss_r, loss_a, sparsity_s, sparsity_d) =
            evaluate(model, &probe_images, &probe_labels, config.control)?;
        let row = TraceRow {
            step,
            loss_g,
            loss_r,
            loss_a,
            sparsity_s,
            sparsity_d,
            lr: config.lr(step),
        };
        debug!("{row:?}");
        trace.push(row);
        Ok::<_, ModelError>(())
    };
    record(&model, 0, &mut trace)?;

    let mut rng = ChaCha8Rng::seed_from_u64(synth::derive_seed(config.seed, 0x7EA1, 0));
    let mut order: Vec<usize> = Vec::new();
    let mut optimizer = Sgd::new(config.momentum);
    let mut last_batch = probe_images.clone();

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..dataset.train.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch.push(order.pop().expect("refilled"));
        }
        let images = stack_images(batch.iter().map(|&i| &dataset.train[i].image))?;
        let labels: Vec<usize> = batch.iter().map(|&i| dataset.train[i].label).collect();

        let mut g = Graph::new();
        let bound = Bound::params(&mut g, &model.params)?;
        let x = g.constant(images.clone()).map_err(ModelError::from)?;
        let built = losses::total_loss(
            &mut g,
            &model.config,
            &bound,
            x,
            &labels,
            config.weights,
            config.control,
        );
        let diverged = |model: Model| TrainError::Diverged {
            step,
            last_good: Box::new(model),
        };
        let (total, _) = match built {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => return Err(diverged(model)),
            Err(e) => return Err(e.into()),
        };
        let grads = match g.backward(total) {
            Ok(grads) => grads,
            Err(e @ GraphError::NonFinite { .. }) => {
                debug!("{e}");
                return Err(diverged(model));
            }
            Err(e) => return Err(ModelError::from(e).into()),
        };
        let grads: BTreeMap<String, Tensor> = bound
            .iter()
            .map(|(name, id)| (name.to_string(), grads.wrt(id)))
            .collect();

        let grads = clip_gradients(grads, config.clip_norm);
        let previous = model.clone();
        optimizer.step(&mut model.params, &grads, config.lr(step));
        if let Some(w) = model.params.get_mut(ARCFACE_WEIGHT) {
            heads::normalize_rows(w);
        }
        if model.params.values().any(|t| !t.is_finite()) {
            return Err(diverged(previous));
        }
        last_batch = images;

        if (step + 1) % config.eval_every == 0 {
            record(&model, step + 1, &mut trace)?;
        }
    }

    let attention_sample = attention_sample(&model, &last_batch)?;
    Ok(TrainOutcome {
        model,
        trace,
        attention_sample,
    })
}

/// Parameters trained by the local losses alone when gradients are stopped.
pub fn is_local_branch(name: &str) -> bool {
    ["attention.", "attention_classifier.", "autoencoder."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Rescales the gradient of each branch (global: backbone, whitening and
/// classifier; local: attention and autoencoder) to at most `max_norm`.
///
/// Clipping the branches separately keeps the global branch's update
/// independent of the local losses whenever they cannot reach it.
pub fn clip_gradients(
    mut grads: BTreeMap<String, Tensor>,
    max_norm: Option<f64>,
) -> BTreeMap<String, Tensor> {
    let Some(max_norm) = max_norm else {
        return grads;
    };
    for local in [false, true] {
        let in_group = |name: &str| is_local_branch(name) == local;
        let norm = grads
            .iter()
            .filter(|(k, _)| in_group(k))
            .flat_map(|(_, t)| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let factor = max_norm / norm;
            for (_, t) in grads.iter_mut().filter(|(k, _)| in_group(k)) {
                t.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    grads
}

pub const TRACE_HEADER: &str = "step,loss_g,loss_r,loss_a,sparsity_s,sparsity_d,lr";

pub fn write_trace_csv(out: &mut impl Write, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step, r.loss_g, r.loss_r, r.loss_a, r.sparsity_s, r.sparsity_d, r.lr
        )?;
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &[TraceRow]) -> std::io::Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trace_csv(&mut file, trace)?;
    file.flush()
}
