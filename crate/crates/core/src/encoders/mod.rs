//! Recipe and image encoders: sentence-level (TR) and hierarchical (HTR)
//! Transformers per recipe component, the merge layer, the image
//! projection and the six cross-component projection heads.

mod model;
mod transformer;

pub use model::{ComponentEmbeddings, ModelParams, RecipeVars};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::component::{Component, ComponentSet};
use crate::corpus::Limits;
use crate::diffcore::DiffError;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("cannot encode an empty token sequence or sentence list")]
    EmptySequence,
    #[error("recipe {0:?} has no non-empty component")]
    EmptyRecipe(String),
    #[error("image feature has length {found}, expected {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("image feature contains non-finite values")]
    NonFiniteFeature,
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("unexpected tensor {0:?}")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Which recipe components feed the model. A disabled component is
/// replaced by its learned empty-component vector for every sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentFlags {
    pub title: bool,
    pub ingredients: bool,
    pub instructions: bool,
}

impl Default for ComponentFlags {
    fn default() -> Self {
        Self {
            title: true,
            ingredients: true,
            instructions: true,
        }
    }
}

impl ComponentFlags {
    pub fn set(self) -> ComponentSet {
        let mut s = ComponentSet::EMPTY;
        for (c, on) in [
            (Component::Title, self.title),
            (Component::Ingredients, self.ingredients),
            (Component::Instructions, self.instructions),
        ] {
            if on {
                s.insert(c);
            }
        }
        s
    }
}

/// Architecture hyper-parameters. Defaults are the full-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of every Transformer and of the component embeddings.
    pub width: usize,
    pub heads: usize,
    /// Layers per Transformer stack (each HTR level has its own stack).
    pub layers: usize,
    pub ff_width: usize,
    /// Joint embedding dimension.
    pub joint_dim: usize,
    /// Length of the precomputed image feature vectors.
    pub image_dim: usize,
    pub max_sentence_len: usize,
    pub max_sentences: usize,
    pub dropout: f64,
    pub components: ComponentFlags,
    /// Ablation: replace every projection head with the identity map.
    pub identity_heads: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 512,
            heads: 4,
            layers: 2,
            ff_width: 2048,
            joint_dim: 1024,
            image_dim: 2048,
            max_sentence_len: 20,
            max_sentences: 20,
            dropout: 0.0,
            components: ComponentFlags::default(),
            identity_heads: false,
        }
    }
}

impl ModelConfig {
    /// The small configuration used by the desk-scale runs and demos.
    pub fn desk() -> Self {
        Self {
            width: 64,
            heads: 2,
            layers: 1,
            ff_width: 256,
            joint_dim: 128,
            image_dim: 32,
            ..Self::default()
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            max_sentence_len: self.max_sentence_len,
            max_sentences: self.max_sentences,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.ff_width == 0 {
            return bad("width, heads, layers and ff_width must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(DiffError::HeadCount {
                width: self.width,
                heads: self.heads,
            }
            .into());
        }
        if self.joint_dim == 0 || self.image_dim == 0 {
            return bad("joint_dim and image_dim must be positive".into());
        }
        if self.max_sentence_len == 0 || self.max_sentences == 0 {
            return bad("sentence limits must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.components.set().is_empty() {
            return bad("at least one recipe component must be enabled".into());
        }
        Ok(())
    }
}
