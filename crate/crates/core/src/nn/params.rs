//! Named parameter storage and the per-forward execution context.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Patch embedding, class token and absolute position table.
    Embedding,
    /// Encoder block, 1-based from the bottom.
    EncoderLayer(usize),
    /// Everything randomly initialized on top of the encoder.
    Head,
}

impl ParamGroup {
    pub fn is_pretrained(self) -> bool {
        !matches!(self, ParamGroup::Head)
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::Embedding => write!(f, "embed"),
            ParamGroup::EncoderLayer(i) => write!(f, "layer{i}"),
            ParamGroup::Head => write!(f, "head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Trainable with weight decay.
    Weight,
    /// Trainable, excluded from weight decay (norms, biases, embeddings).
    NoDecay,
    /// Non-trainable state such as running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn insert(&mut self, entry: ParamEntry<T>) -> ParamId {
        assert!(!self.by_name.contains_key(&entry.name), "duplicate parameter {}", entry.name);
        self.by_name.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param set",
                detail: format!("{}: {:?} vs {:?}", e.name, e.value.shape(), value.shape()),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.iter().filter(|(_, e)| e.role != ParamRole::Buffer)
    }

    /// Number of trainable scalars, split into (pretrained groups, head).
    pub fn count(&self) -> (usize, usize) {
        self.trainable().fold((0, 0), |(p, r), (_, e)| {
            if e.group.is_pretrained() {
                (p + e.value.numel(), r)
            } else {
                (p, r + e.value.numel())
            }
        })
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    TruncNormal(f64),
    Uniform(f64, f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// He-normal for ReLU-like layers, `N(0, 2/fan_in)`.
    He(usize),
    Xavier(usize, usize),
}

impl Init {
    fn sample<T: Scalar>(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Ones => Tensor::ones(shape.to_vec()),
            Init::Normal(std) => Tensor::randn(shape.to_vec(), std, rng),
            Init::TruncNormal(std) => Tensor::trunc_normal(shape.to_vec(), std, rng),
            Init::Uniform(lo, hi) => Tensor::uniform(shape.to_vec(), lo, hi, rng),
            Init::FanIn(fan) => {
                let b = 1.0 / (fan as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -b, b, rng)
            }
            Init::He(fan) => Tensor::randn(shape.to_vec(), (2.0 / fan as f64).sqrt(), rng),
            Init::Xavier(fi, fo) => {
                let b = (6.0 / (fi + fo) as f64).sqrt();
                Tensor::uniform(shape.to_vec(), -b, b, rng)
            }
        }
    }
}

/// Creates parameters under a dotted name prefix and a learning-rate group.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self { store, rng, prefix: String::new(), group }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.full_name(name);
        ParamBuilder { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    pub fn sub_group(&mut self, name: &str, group: ParamGroup) -> ParamBuilder<'_, T> {
        let prefix = self.full_name(name);
        ParamBuilder { store: self.store, rng: self.rng, prefix, group }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, role: ParamRole) -> ParamId {
        let value = init.sample(shape, self.rng);
        self.add_value(name, value, role)
    }

    pub fn add_value(&mut self, name: &str, value: Tensor<T>, role: ParamRole) -> ParamId {
        let name = self.full_name(name);
        self.store.insert(ParamEntry { name, value, group: self.group, role })
    }

    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, init, ParamRole::Weight)
    }

    pub fn no_decay(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, init, ParamRole::NoDecay)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.add_value(name, value, ParamRole::Buffer)
    }
}

/// Execution context for one forward pass: binds stored parameters to graph
/// leaves and carries the train/eval switch.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    vars: RefCell<Vec<Option<Var<'g, T>>>>,
    training: bool,
    track_grads: bool,
    rng: RefCell<ChaCha8Rng>,
    buffer_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    /// Training context: parameters receive gradients, dropout-like paths
    /// and batch statistics are active.
    pub fn train(graph: &'g Graph<T>, store: &'g ParamStore<T>, seed: u64) -> Self {
        Self::build(graph, store, true, true, seed)
    }

    /// Inference context: no gradients, running statistics.
    pub fn eval(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::build(graph, store, false, false, 0)
    }

    /// Eval-mode semantics with gradients tracked (gradient checks).
    pub fn eval_with_grads(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::build(graph, store, false, true, 0)
    }

    fn build(graph: &'g Graph<T>, store: &'g ParamStore<T>, training: bool, track_grads: bool, seed: u64) -> Self {
        Self {
            graph,
            store,
            vars: RefCell::new(vec![None; store.len()]),
            training,
            track_grads,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    /// The graph leaf bound to a stored parameter.
    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars[id.0] {
            return v;
        }
        let entry = self.store.get(id);
        let v = if self.track_grads && entry.role != ParamRole::Buffer {
            self.graph.param(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, id: ParamId) -> &'g Tensor<T> {
        &self.store.get(id).value
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub fn queue_buffer_update(&self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    /// Gradients for every parameter bound during the forward pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v).map(|g| (ParamId(i), g.clone()))))
            .collect()
    }
}
