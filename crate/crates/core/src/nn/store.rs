use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named tensors of one network: trainable parameters plus fixed buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names, which are programming errors.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Records every tensor on `tape`. Trainable tensors become gradient
    /// leaves when `grad` is set; everything else is a constant.
    pub fn bind(&self, tape: &mut Tape, grad: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| if grad && e.trainable { tape.leaf(e.value.clone()) } else { tape.constant(e.value.clone()) })
            .collect();
        Bound { vars }
    }

    /// Copies every value from `other`, matched by name.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), String> {
        for e in &mut self.entries {
            let src = other.by_name.get(&e.name).map(|&i| &other.entries[i].value).ok_or_else(|| format!("missing tensor `{}`", e.name))?;
            if src.shape() != e.value.shape() {
                return Err(format!("tensor `{}` has shape {:?}, expected {:?}", e.name, src.shape(), e.value.shape()));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Forward-pass context.
///
/// In calibration mode batch-norm layers measure the statistics of their
/// input, use them, and record them so the caller can freeze them.
pub struct Ctx<'a> {
    pub bound: &'a Bound,
    calib: Option<RefCell<Vec<(ParamId, Vec<f64>)>>>,
}

impl<'a> Ctx<'a> {
    pub fn new(bound: &'a Bound) -> Self {
        Self { bound, calib: None }
    }

    pub fn calibrating(bound: &'a Bound) -> Self {
        Self { bound, calib: Some(RefCell::new(Vec::new())) }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn is_calibrating(&self) -> bool {
        self.calib.is_some()
    }

    pub(crate) fn record(&self, id: ParamId, values: Vec<f64>) {
        if let Some(c) = &self.calib {
            c.borrow_mut().push((id, values));
        }
    }

    /// Writes recorded statistics into `store`.
    pub fn commit(self, store: &mut ParamStore) {
        if let Some(c) = self.calib {
            for (id, values) in c.into_inner() {
                store.get_mut(id).data_mut().copy_from_slice(&values);
            }
        }
    }
}
