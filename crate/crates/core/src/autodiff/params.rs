use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameters registered on one graph, remembering which node holds which
/// parameter.
#[derive(Debug, Default)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new(len: usize) -> Self {
        Self { vars: vec![None; len] }
    }

    /// Node for parameter `id`, registering it on first use.
    pub fn var<T: Element>(&mut self, graph: &mut Graph<T>, params: &ParamSet<T>, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| graph.leaf(params.get(id)))
    }

    /// Copies the gradients accumulated on `graph` into the parameter
    /// tensors. Unused parameters get no gradient.
    pub fn collect_grads<T: Element>(&self, graph: &Graph<T>, params: &mut ParamSet<T>) {
        for (i, var) in self.vars.iter().enumerate() {
            let t = params.get_mut(ParamId(i));
            match var.and_then(|v| graph.grad(v)) {
                Some(g) => t.set_grad(g.to_vec()).expect("gradient matches parameter"),
                None => t.clear_grad(),
            }
        }
    }
}

/// SGD with momentum: `v ← μ·v − lr·g`, `θ ← θ + v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Drops all momentum state.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Updates every parameter that carries a gradient; others are left
    /// bit-for-bit untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        for id in params.ids().collect::<Vec<_>>() {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let v = self.velocity[id.0].get_or_insert_with(|| vec![T::zero(); g.len()]);
            for ((vi, gi), p) in v.iter_mut().zip(&g).zip(t.data_mut()) {
                *vi = mu * *vi - lr * *gi;
                *p += *vi;
            }
        }
    }
}

/// One plain SGD-with-momentum update on a parameter set.
pub fn sgd_momentum_step<T: Element>(params: &mut ParamSet<T>, optimizer: &mut Sgd<T>) {
    optimizer.step(params)
}
