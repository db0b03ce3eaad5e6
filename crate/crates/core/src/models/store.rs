use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Checkpoint, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, subject to weight decay.
    Weight,
    /// Trainable, exempt from weight decay (biases, norms, tokens, embeddings).
    NoDecay,
    /// Running statistic; saved but never optimized.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
    pub frozen: bool,
}

impl<T: Scalar> Entry<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer && !self.frozen
    }
}

/// Ordered, named tensors. Indices are stable for the life of the store.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    entries: Vec<Entry<T>>,
}

/// Tape handles for every entry of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.0[i]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> usize {
        let name = name.into();
        debug_assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            kind,
            frozen: false,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<T>] {
        &mut self.entries
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.get(i))
    }

    /// Number of non-buffer scalars.
    pub fn n_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.frozen = pred(&e.name);
        }
    }

    /// Trainable entries become tape parameters, the rest constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| {
                    if e.trainable() {
                        tape.param(e.value.clone())
                    } else {
                        tape.constant(e.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Every entry as a constant, for inference.
    pub fn bind_constants(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.entries.iter().map(|e| tape.constant(e.value.clone())).collect())
    }

    /// Gradients in store order; `None` for entries that are not trainable.
    /// Trainable entries the loss did not reach get a zero gradient.
    pub fn grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        self.entries
            .iter()
            .zip(&bound.0)
            .map(|(e, &v)| {
                e.trainable()
                    .then(|| tape.grad(v).unwrap_or_else(|| Tensor::zeros(e.value.shape().to_vec())))
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    kind: e.kind,
                    frozen: e.frozen,
                })
                .collect(),
        }
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for e in &self.entries {
            ck.push(format!("{prefix}{}", e.name), e.value.cast());
        }
        ck
    }

    /// Overwrites every entry from `ck`; names and shapes must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        for e in &mut self.entries {
            let key = format!("{prefix}{}", e.name);
            let t = ck
                .get(&key)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing tensor {key:?}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {key:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    /// SHA-256 over the names and values of matching entries.
    pub fn digest(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(&e.name)) {
            h.update(e.name.as_bytes());
            for &v in e.value.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
