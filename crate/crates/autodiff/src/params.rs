//! Named parameter tables.

use indexmap::IndexMap;

use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Float, Tensor};

/// Ordered name → tensor table. Trainable parameters and non-trainable
/// buffers (batch-norm running statistics) live side by side.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: IndexMap<String, Tensor<T>>,
    pub buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new(), buffers: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Binding {
        self.bind_where(g, |_| true)
    }

    /// Binds only the parameters whose name passes `keep`.
    pub fn bind_where(&self, g: &mut Graph<T>, keep: impl Fn(&str) -> bool) -> Binding {
        Binding { vars: self.params.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), g.param(v.clone()))).collect() }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Binding {
    pub vars: IndexMap<String, Var>,
}

impl Binding {
    /// Panics on an unknown name: parameter names are fixed by the model
    /// builder, so a miss is a programming error.
    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    /// Gradients by parameter name; parameters the loss does not reach get
    /// zeros.
    pub fn collect<T: Float>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)))))
            .collect()
    }
}
