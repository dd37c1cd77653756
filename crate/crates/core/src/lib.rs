//! Cross-modal recipe retrieval: hierarchical Transformer recipe encoders,
//! image projections trained with bidirectional triplet losses, a
//! self-supervised loss between recipe components, and exact retrieval
//! evaluation. Everything runs on a small reverse-mode tape in [`diffcore`].

pub mod component;
pub mod corpus;
pub mod diffcore;
pub mod encoders;
pub mod losses;
pub mod retrieval;
pub mod synthetic;
pub mod trainer;

pub use component::{Component, ComponentSet};
