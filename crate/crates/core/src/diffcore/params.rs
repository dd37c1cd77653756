use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{Scalar, Tensor};

/// Handle to one learnable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of learnable tensors. Names are the canonical
/// checkpoint keys; insertion order is the canonical iteration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) {
        assert_eq!(
            self.tensors[id.0].shape(),
            tensor.shape(),
            "shape change for parameter {}",
            self.names[id.0]
        );
        self.tensors[id.0] = Arc::new(tensor);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t.as_ref()))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }
}
