use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamKey, Tape, Tensor};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
struct Entry {
    name: String,
    value: Arc<Array2<f64>>,
    trainable: bool,
}

/// Named parameters in insertion order.
///
/// Every store carries a process-unique id so that parameters of several
/// stores can live on one tape without colliding. Cloning yields an
/// independent store with a fresh id and shared (copy-on-write) values.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<Entry>,
    lookup: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: Arc::clone(&e.value),
                    trainable: e.trainable,
                })
                .collect(),
            lookup: self.lookup.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Register a new trainable parameter. Panics on a duplicate name,
    /// which is a construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        let idx = self.entries.len();
        self.lookup.insert(name.clone(), idx);
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable: true,
        });
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, id: ParamId) -> ParamKey {
        ParamKey {
            store: self.uid,
            index: id.0,
        }
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.dim() != value.dim() {
            return Err(Error::shape(
                "param_set",
                format!(
                    "{}: expected {:?}, got {:?}",
                    entry.name,
                    entry.value.dim(),
                    value.dim()
                ),
            ));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &*e.value))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Mark exactly the parameters whose name satisfies `pred` as trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = pred(&e.name);
        }
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }

    pub fn set_trainable_flags(&mut self, flags: &[bool]) {
        assert_eq!(flags.len(), self.entries.len(), "one flag per parameter");
        for (e, &f) in self.entries.iter_mut().zip(flags) {
            e.trainable = f;
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn unfreeze_all(&mut self) {
        self.set_trainable_where(|_| true);
    }

    /// Tensor for a parameter: a tracked leaf when trainable and the tape
    /// is recording, a constant otherwise.
    pub fn bind(&self, tape: &Tape, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        if e.trainable {
            tape.param(self.key(id), &e.value)
        } else {
            Tensor::from_shared(Arc::clone(&e.value))
        }
    }

    pub fn grad<'g>(&self, grads: &'g Gradients, id: ParamId) -> Option<&'g Array2<f64>> {
        grads.param(self.key(id))
    }

    /// Global L2 norm of this store's gradients.
    pub fn grad_norm(&self, grads: &Gradients) -> f64 {
        self.ids()
            .filter_map(|id| self.grad(grads, id))
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Bitwise equality of the named subset of parameters.
    pub fn bitwise_eq_where(&self, other: &ParamStore, pred: impl Fn(&str) -> bool) -> bool {
        self.entries
            .iter()
            .filter(|e| pred(&e.name))
            .all(|e| match other.id(&e.name) {
                Some(id) => {
                    let o = other.get(id);
                    o.dim() == e.value.dim()
                        && o.iter()
                            .zip(e.value.iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                None => false,
            })
    }
}
