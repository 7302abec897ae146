//! Named parameter storage and the per-forward binding context.
//!
//! Modules register their tensors in a [`Registry`] (names, shapes and init
//! rules only), which can be materialized into a [`ParamStore`] or inspected
//! without allocating, e.g. for parameter census of the full-size preset.

use std::collections::HashMap;

use aggrnet_tensor::{Element, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BN_MOMENTUM;
use crate::error::{Error, Result};
use crate::fea::MaskMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Learnable,
    /// Non-learnable state such as normalization running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub init: Init,
    /// Range enforced after every optimizer step.
    pub clamp: Option<(f64, f64)>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind, init: Init) -> ParamId {
        self.push(ParamSpec { name: name.into(), shape: shape.to_vec(), kind, init, clamp: None })
    }

    pub fn push(&mut self, spec: ParamSpec) -> ParamId {
        debug_assert!(self.specs.iter().all(|s| s.name != spec.name), "duplicate parameter {}", spec.name);
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn learnable(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.add(name, shape, ParamKind::Learnable, init)
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, shape, ParamKind::Buffer, Init::Const(value))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.specs.iter().filter(|s| s.kind == ParamKind::Learnable).map(ParamSpec::numel).sum()
    }

    pub fn materialize<F: Element, R: Rng + ?Sized>(self, rng: &mut R) -> ParamStore<F> {
        let values = self
            .specs
            .iter()
            .map(|s| match s.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::rand_uniform(s.shape.clone(), -bound, bound, rng)
                }
                Init::Const(v) => Tensor::full(s.shape.clone(), F::lit(v)),
            })
            .collect();
        ParamStore::from_parts(self.specs, values)
    }
}

/// Materialized parameters in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Element> ParamStore<F> {
    fn from_parts(specs: Vec<ParamSpec>, values: Vec<Tensor<F>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), ParamId(i))).collect();
        Self { specs, values, index }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        if value.shape() != self.specs[id.0].shape.as_slice() {
            return Err(Error::Config(format!(
                "parameter {} expects shape {:?}, got {:?}",
                self.specs[id.0].name,
                self.specs[id.0].shape,
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn learnable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.specs[id.0].kind == ParamKind::Learnable)
    }

    pub fn learnable_count(&self) -> usize {
        self.learnable_ids().map(|id| self.values[id.0].numel()).sum()
    }
}

/// How a forward pass behaves: normalization statistics and FEM masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// Use batch statistics in normalization layers and emit running-stat
    /// updates; otherwise use the stored running statistics.
    pub batch_stats: bool,
    pub mask: MaskMode,
    /// Weight of the current batch when blending into running statistics.
    pub stat_momentum: f64,
}

impl Mode {
    pub fn train(mask: MaskMode) -> Self {
        Self { batch_stats: true, mask, stat_momentum: BN_MOMENTUM }
    }

    /// Inference: running statistics and the binary masks.
    pub fn eval() -> Self {
        Self { batch_stats: false, mask: MaskMode::Hard, stat_momentum: BN_MOMENTUM }
    }
}

/// Binds stored parameters onto a tape for one forward pass.
pub struct Ctx<'a, F: Element> {
    pub tape: &'a mut Tape<F>,
    params: &'a ParamStore<F>,
    pub mode: Mode,
    bound: HashMap<ParamId, Var>,
    updates: Vec<(ParamId, Tensor<F>)>,
}

impl<'a, F: Element> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, params: &'a ParamStore<F>, mode: Mode) -> Self {
        Self { tape, params, mode, bound: HashMap::new(), updates: Vec::new() }
    }

    /// Use `var` for parameter `id` instead of a fresh leaf.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let spec = self.params.spec(id);
        let v = self.tape.leaf(self.params.get(id).clone(), spec.kind == ParamKind::Learnable);
        self.bound.insert(id, v);
        v
    }

    /// Current stored value, not recorded on the tape.
    pub fn stored(&self, id: ParamId) -> &Tensor<F> {
        self.params.get(id)
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor<F>) {
        self.updates.push((id, value));
    }

    /// Parameter-to-variable bindings and pending buffer updates.
    pub fn finish(self) -> (HashMap<ParamId, Var>, Vec<(ParamId, Tensor<F>)>) {
        (self.bound, self.updates)
    }
}
