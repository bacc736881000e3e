//! Named parameter storage and the per-forward binding of parameters onto a
//! tape.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, name-addressable parameter set. Registration order is stable and
/// defines checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("param set", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    /// Sets the trainable flag of every parameter whose name starts with
    /// `prefix`; returns how many matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Binds store parameters onto one tape, lazily and at most once each.
///
/// Frozen parameters, and every parameter of an inference session, enter the
/// tape as constants.
pub struct Session<'a> {
    tape: &'a Tape,
    store: &'a ParamStore,
    train: bool,
    bound: RefCell<BTreeMap<ParamId, Var>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, train: bool) -> Self {
        Session {
            tape,
            store,
            train,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// A session whose parameters are already on the tape, one `Var` per
    /// store entry in registration order (used for gradient audits).
    pub fn prebound(tape: &'a Tape, store: &'a ParamStore, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len());
        let bound = store.ids().zip(vars.iter().copied()).collect();
        Session {
            tape,
            store,
            train: true,
            bound: RefCell::new(bound),
        }
    }

    pub fn tape(&self) -> &'a Tape {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.train && self.store.is_trainable(id) {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Parameters touched by this session so far.
    pub fn accessed(&self) -> Vec<ParamId> {
        self.bound.borrow().keys().copied().collect()
    }

    /// Gradients of every bound trainable parameter, in id order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .filter(|(id, _)| self.store.is_trainable(**id))
            .map(|(&id, &v)| (id, grads.get_or_zeros(v)))
            .collect()
    }
}
