use std::collections::HashMap;

use indexmap::IndexMap;

use super::array::Tensor;
use super::graph::{BatchStats, Gradients, Graph, Var};
use crate::error::{Error, Result};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered, named parameter set of a model. Non-trainable entries hold
/// buffers such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Copies every tensor of `other` into the entry of the same name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, param) in &mut self.entries {
            let src = other
                .entries
                .get(name)
                .ok_or_else(|| Error::Malformed(format!("checkpoint lacks parameter `{name}`")))?;
            if src.tensor.shape() != param.tensor.shape() {
                return Err(Error::shape(name.clone(), param.tensor.shape(), src.tensor.shape()));
            }
            param.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Folds batch statistics into `{layer}.running_mean` / `.running_var`.
    pub fn apply_batch_stats(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (layer, stats) in updates {
            let rm = self.tensor_mut(&format!("{layer}.running_mean"))?;
            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.tensor_mut(&format!("{layer}.running_var"))?;
            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph plus the parameter leaves it has pulled in.
pub struct Session<'a> {
    pub graph: Graph,
    pub mode: Mode,
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    order: Vec<String>,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            store,
            vars: HashMap::new(),
            order: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let v = self.graph.leaf(p.tensor.clone(), p.trainable);
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    pub fn record_batch_stats(&mut self, layer: &str, stats: BatchStats) {
        self.bn_updates.push((layer.to_string(), stats));
    }

    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of every trainable parameter in the store, zero-filled for
    /// parameters this pass did not touch.
    pub fn param_grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = match self.vars.get(name) {
                    Some(v) => grads.get_or_zeros(*v, p.tensor.shape()),
                    None => Tensor::zeros(p.tensor.shape()),
                };
                (name.to_string(), g)
            })
            .collect()
    }
}
