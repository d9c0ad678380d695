//! Named parameter arrays and non-trainable buffers (normalization running stats).

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterStore<T: Float> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        assert!(!self.params.contains_key(&name), "duplicate parameter {name}");
        self.params.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }

    /// Total scalar parameter count (buffers excluded).
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and values of parameters and buffers.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (tag, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (k, v) in map {
                h.update(tag.as_bytes());
                h.update(k.as_bytes());
                for &d in v.shape() {
                    h.update((d as u64).to_le_bytes());
                }
                let mut bytes = Vec::with_capacity(v.len() * T::BYTES);
                for &x in v.data() {
                    x.write_le(&mut bytes);
                }
                h.update(&bytes);
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies running-statistic updates produced by a training forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            let slot = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::shape("buffer update", name));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Parameters as trainable graph leaves.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, '_, T> {
        self.bind_as(g, true)
    }

    /// Parameters as constants: the network participates but receives no gradient.
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Bound<'g, '_, T> {
        self.bind_as(g, false)
    }

    /// Binds `vars`, taken in parameter order, in place of fresh leaves. Used
    /// to drive a network from variables the caller already owns.
    pub fn bind_vars<'g>(&self, vars: &[Var<'g, T>]) -> Result<Bound<'g, '_, T>> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for ((name, p), v) in self.params.iter().zip(vars) {
            if p.shape() != v.shape().as_slice() {
                return Err(Error::shape(
                    "bind_vars",
                    format!("{name}: {:?} vs {:?}", p.shape(), v.shape()),
                ));
            }
        }
        let vars = self.params.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(Bound { store: self, vars })
    }

    fn bind_as<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, '_, T> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A store's parameters bound into one graph.
pub struct Bound<'g, 's, T: Float> {
    store: &'s ParameterStore<T>,
    vars: IndexMap<String, Var<'g, T>>,
}

/// Graph view of one layer's parameters.
#[derive(Clone)]
pub struct LayerParams<'g, T: Float> {
    pub name: String,
    pub weight: Var<'g, T>,
    pub bias: Option<Var<'g, T>>,
    /// `(mean, variance)` for batch renormalization layers.
    pub running_stats: Option<(Tensor<T>, Tensor<T>)>,
}

impl<'g, T: Float> Bound<'g, '_, T> {
    pub fn var(&self, name: &str) -> Var<'g, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn layer(&self, name: &str) -> LayerParams<'g, T> {
        let running_stats = match (
            self.store.buffer(&format!("{name}.running_mean")),
            self.store.buffer(&format!("{name}.running_var")),
        ) {
            (Some(m), Some(v)) => Some((m.clone(), v.clone())),
            _ => None,
        };
        LayerParams {
            name: name.to_string(),
            weight: self.var(&format!("{name}.weight")),
            bias: self.vars.get(&format!("{name}.bias")).copied(),
            running_stats,
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'g, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradient of a scalar loss for every bound parameter, detached.
    pub fn grads(&self, loss: Var<'g, T>) -> IndexMap<String, Tensor<T>> {
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<Var<'g, T>> = self.vars.values().copied().collect();
        let grads = loss.graph().grad(loss, &vars, false);
        names
            .into_iter()
            .zip(grads)
            .map(|(k, g)| (k.clone(), (*g.value()).clone()))
            .collect()
    }
}
