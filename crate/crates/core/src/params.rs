use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numeric::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    /// Weight decay applies (false for biases and layer-norm parameters).
    pub decay: bool,
}

/// Named model parameters, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, decay: bool) {
        self.entries.insert(name.into(), Param { value, decay });
    }

    pub fn insert_gaussian(&mut self, name: &str, shape: &[usize], std: f64, r: &mut impl Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * r.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"), true);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// Parameters placed on one tape. Names accepted by `trainable` become
/// gradient leaves, everything else is recorded as a constant.
pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn bind(tape: &'t Tape, store: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, p)| {
                let v = if trainable(name) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Binds only the names accepted by `include`; all of them trainable.
    pub fn bind_subset(tape: &'t Tape, store: &ParamStore, include: impl Fn(&str) -> bool) -> Self {
        let vars = store
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, p)| (name.clone(), tape.param(p.value.clone())))
            .collect();
        Self { vars }
    }

    /// Overrides (or adds) bindings, e.g. to route gradient-check leaves
    /// through a model function.
    pub fn replace(&mut self, items: impl IntoIterator<Item = (String, Var<'t>)>) {
        self.vars.extend(items);
    }

    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}
