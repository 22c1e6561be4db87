//! Named parameter storage and graph binding.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

/// Parameters keyed by canonical name; iteration order is the name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    /// Panics when `name` is missing; model code only asks for names it created.
    pub fn tensor(&self, name: &str) -> &Tensor {
        self.map.get(name).unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count over names accepted by `keep`.
    pub fn count_where(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.map.iter().filter(|(k, _)| keep(k)).map(|(_, t)| t.len()).sum()
    }

    pub fn count(&self) -> usize {
        self.count_where(|_| true)
    }
}

/// Symmetric uniform fill in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Fan-in scaled uniform init for a `[fan_in, fan_out]` linear map.
pub fn linear_init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    uniform(&[fan_in, fan_out], 1.0 / libm::sqrt(fan_in as f64), rng)
}

/// Binds parameters into a graph on first use. Names matched by `frozen`
/// enter as constants.
pub struct Binder<'p> {
    params: &'p Params,
    vars: BTreeMap<String, Var>,
    frozen: Vec<String>,
    all_frozen: bool,
}

impl<'p> Binder<'p> {
    pub fn trainable(params: &'p Params) -> Self {
        Self { params, vars: BTreeMap::new(), frozen: Vec::new(), all_frozen: false }
    }

    /// Every parameter enters as a constant (inference).
    pub fn frozen(params: &'p Params) -> Self {
        Self { all_frozen: true, ..Self::trainable(params) }
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.all_frozen || self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self.params.tensor(name).clone();
        let v = if self.is_frozen(name) { g.constant(t) } else { g.param(t) };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
