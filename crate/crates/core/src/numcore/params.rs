use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Named trainable tensors. Aliases map a second name onto a canonical
/// tensor so both names read the same storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    aliases: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.aliases.contains_key(&name) {
            return Err(Error::contract(format!("parameter {name} registered twice")));
        }
        t.requires_grad = true;
        t.grad = None;
        self.params.insert(name, t);
        Ok(())
    }

    /// Makes `alias` read and write the storage of `canonical`.
    pub fn alias(&mut self, alias: impl Into<String>, canonical: &str) -> Result<()> {
        let alias = alias.into();
        let target = self.resolve(canonical)?.to_string();
        if self.params.contains_key(&alias) || self.aliases.contains_key(&alias) {
            return Err(Error::contract(format!("alias {alias} already bound")));
        }
        self.aliases.insert(alias, target);
        Ok(())
    }

    pub fn resolve<'a>(&'a self, name: &'a str) -> Result<&'a str> {
        if self.params.contains_key(name) {
            return Ok(name);
        }
        self.aliases
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.resolve(name).is_ok()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let c = self.resolve(name)?;
        Ok(&self.params[c])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let c = self.resolve(name)?.to_string();
        Ok(self.params.get_mut(&c).expect("resolved name exists"))
    }

    pub fn canonical(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn canonical_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, &str)> {
        self.aliases.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Number of canonical tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over canonical tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = Some(vec![0.0; t.len()]);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.params.values_mut() {
            t.grad = None;
        }
    }

    /// Adds the gradients recorded for this store's parameters on `graph`.
    /// Parameters the loss never reached receive zeros.
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) -> Result<()> {
        for t in self.params.values_mut() {
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
        for (name, var) in graph.param_vars() {
            let Some(g) = grads.wrt(var) else { continue };
            let t = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("graph parameter {name} not in store")))?;
            let buf = t.grad.as_mut().expect("initialised above");
            buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
        }
        Ok(())
    }

    /// Glorot-uniform matrix `[rows x cols]`.
    pub fn init_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(name, Tensor::filled(shape, value))
    }

    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }
}
