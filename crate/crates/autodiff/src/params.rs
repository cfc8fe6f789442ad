use crate::checkpoint::NamedTensor;
use crate::error::{NnError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Weight,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
    kind: Kind,
    frozen: bool,
}

/// Named store of parameters and buffers shared by one or more layer stacks.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn insert(&mut self, name: &str, tensor: Tensor<T>, kind: Kind) -> Result<ParamId> {
        if self.id_of(name).is_some() {
            return Err(NnError::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Entry { name: name.to_string(), tensor, kind, frozen: false });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Adds a trainable tensor. Panics on a duplicate name; use
    /// [`try_add`](Self::try_add) when names come from user input.
    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.try_add(name, tensor).expect("unique parameter name")
    }

    pub fn try_add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, Kind::Weight)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        self.insert(name, tensor, Kind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn is_buffer(&self, id: ParamId) -> bool {
        self.entries[id.0].kind == Kind::Buffer
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        let e = &self.entries[id.0];
        e.kind == Kind::Weight && !e.frozen
    }

    /// Freezes (or unfreezes) every trainable entry whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    /// Number of scalars that currently receive gradients.
    pub fn trainable_scalars(&self) -> usize {
        self.ids().filter(|&id| self.requires_grad(id)).map(|id| self.get(id).numel()).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|e| NamedTensor {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: e.tensor.data().iter().map(|x| x.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every entry whose name starts with `prefix` from `named`.
    /// Each such entry must be present with an identical shape.
    pub fn load_prefix(&mut self, named: &[NamedTensor], prefix: &str) -> Result<usize> {
        let mut loaded = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            let src = named
                .iter()
                .find(|n| n.name == e.name)
                .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {}", e.name)))?;
            if src.shape != e.tensor.shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape,
                    e.tensor.shape()
                )));
            }
            for (d, &s) in e.tensor.data_mut().iter_mut().zip(&src.data) {
                *d = T::from_f64(f64::from(s));
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}
