use crate::error::{DfsError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    /// Trainable; receives gradients unless frozen.
    Param,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    kind: EntryKind,
    tensor: Tensor,
}

/// Named arena of every parameter and buffer of a model.
///
/// Names are dotted paths (`backbone.blocks.3.conv1.weight`). The order of
/// registration is stable and is the order used by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = true;
        self.push(name.into(), EntryKind::Param, tensor)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.requires_grad = false;
        self.push(name.into(), EntryKind::Buffer, tensor)
    }

    fn push(&mut self, name: String, kind: EntryKind, tensor: Tensor) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry { name, kind, tensor });
        ParamId(self.entries.len() - 1)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> EntryKind {
        self.entries[id.0].kind
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    /// Two distinct entries borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut Tensor, &mut Tensor) {
        assert_ne!(a, b, "pair_mut needs distinct ids");
        if a.0 < b.0 {
            let (lo, hi) = self.entries.split_at_mut(b.0);
            (&mut lo[a.0].tensor, &mut hi[0].tensor)
        } else {
            let (lo, hi) = self.entries.split_at_mut(a.0);
            (&mut hi[0].tensor, &mut lo[b.0].tensor)
        }
    }

    /// Sets `requires_grad` on every trainable entry whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self
            .entries
            .iter_mut()
            .filter(|e| e.kind == EntryKind::Param && e.name.starts_with(prefix))
        {
            e.tensor.requires_grad = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    pub fn num_trainable_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param && e.name.starts_with(prefix))
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Copies values from `other` for every name present in both stores.
    /// Returns the number of entries copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(id) = other.find(&e.name) {
                let src = other.get(id);
                if src.shape() != e.tensor.shape() {
                    return Err(DfsError::Shape {
                        op: "load_matching",
                        lhs: e.tensor.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                e.tensor.data_mut().copy_from_slice(src.data());
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Bitwise snapshot of every entry under `prefix`, for freeze checks.
    pub fn snapshot(&self, prefix: &str) -> Vec<(String, Vec<u32>)> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| {
                (
                    e.name.clone(),
                    e.tensor.data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    }
}
