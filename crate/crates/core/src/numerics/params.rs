use std::cell::RefCell;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tape::{Gradients, Tape, Var};
use super::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<NamedParam>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(NamedParam { name, value });
        ParamId(self.params.len() - 1)
    }

    /// Uniform Glorot initialisation for a `[fan_in × fan_out]` weight, scaled by `gain`.
    pub fn register_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        self.register(name, Tensor::from_parts(vec![fan_in, fan_out], data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NamedParam)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }
}

/// Per-parameter gradient buffers (`None` when a parameter was not reached).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                let dst = dst.get_or_insert_with(|| vec![0.0; src.len()]);
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().flatten().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

/// Binds a [`ParamStore`] to a [`Tape`], creating each parameter leaf at most once.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self {
            tape,
            store,
            leaves: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.0].get_or_insert_with(|| self.tape.leaf(self.store.get(id).clone()))
    }

    /// Moves parameter gradients out of a finished backward sweep.
    pub fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        let leaves = self.leaves.borrow();
        ParamGrads {
            grads: leaves
                .iter()
                .map(|leaf| leaf.and_then(|v| grads.take(v.id())))
                .collect(),
        }
    }
}
