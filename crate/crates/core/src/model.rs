//! Model configuration, named parameter storage and graph binding.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{self, BackboneConfig, Tap};
use crate::heads::{self, HeadConfig};
use crate::numgraph::{Graph, GraphError, NodeId, Tensor};

/// Parameters keyed by dotted name, iterated in name order.
pub type ParamStore = BTreeMap<String, Tensor>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("image side {side} is below the minimum side {min_side}")]
    ImageTooSmall { side: usize, min_side: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        let heads = HeadConfig::for_backbone(&backbone);
        Self {
            backbone,
            heads,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        self.heads.validate()?;
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn shallow_channels(&self) -> usize {
        self.backbone.channels(Tap::Shallow)
    }

    pub fn deep_channels(&self) -> usize {
        self.backbone.channels(Tap::Deep)
    }
}

/// Configuration plus every learnable tensor (backbone, heads and classifiers).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init_params(&config.backbone, &mut rng, &mut params);
        heads::init_params(&config, &mut rng, &mut params);
        Ok(Self { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }
}

/// Graph node for each named parameter.
#[derive(Debug, Default, Clone)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    /// Binds every parameter as a differentiable leaf.
    pub fn params(g: &mut Graph, store: &ParamStore) -> Result<Self, ModelError> {
        let mut ids = BTreeMap::new();
        for (name, t) in store {
            ids.insert(name.clone(), g.param(t.clone())?);
        }
        Ok(Self { ids })
    }

    /// Binds the parameters whose name starts with `prefix` as constants.
    pub fn constants(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self, ModelError> {
        let mut ids = BTreeMap::new();
        for (name, t) in store.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            ids.insert(name.clone(), g.constant(t.clone())?);
        }
        Ok(Self { ids })
    }

    pub fn extend(&mut self, other: Bound) {
        self.ids.extend(other.ids);
    }

    pub fn get(&self, name: &str) -> Result<NodeId, ModelError> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Adds a leading batch axis to an `[H,W,C]` tensor; `[N,H,W,C]` passes through.
pub fn batched(image: &Tensor) -> Result<Tensor, ModelError> {
    match image.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            Ok(image.clone().reshape(shape)?)
        }
        4 => Ok(image.clone()),
        _ => Err(ModelError::InvalidInput(format!(
            "expected [H,W,C] or [N,H,W,C] image, got {:?}",
            image.shape()
        ))),
    }
}
