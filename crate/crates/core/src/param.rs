//! Named model parameters, their binding onto a tape, and the parameter census.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

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
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "assign",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// FNV-1a over the bit patterns of every parameter matching `filter`.
    pub fn checksum(&self, filter: impl Fn(&Param) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| filter(p)) {
            for byte in p.name.bytes() {
                h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h = (h ^ byte as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn census(&self) -> Census {
        let rows = self
            .params
            .iter()
            .map(|p| CensusRow {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.numel(),
                trainable: !p.frozen,
            })
            .collect();
        Census { rows }
    }
}

#[derive(Clone, Debug)]
pub struct CensusRow {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Census {
    pub rows: Vec<CensusRow>,
}

impl Census {
    pub fn trainable(&self) -> usize {
        self.rows.iter().filter(|r| r.trainable).map(|r| r.count).sum()
    }

    pub fn frozen(&self) -> usize {
        self.rows.iter().filter(|r| !r.trainable).map(|r| r.count).sum()
    }

    pub fn total(&self) -> usize {
        self.trainable() + self.frozen()
    }

    pub fn ratio_of_total(&self) -> f64 {
        self.trainable() as f64 / self.total() as f64
    }

    /// Trainable count relative to the frozen count.
    pub fn ratio_of_frozen(&self) -> f64 {
        self.trainable() as f64 / self.frozen() as f64
    }

    /// Plain-text table: one row per parameter, then totals.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:<16}  {:>8}  status", "name", "shape", "count");
        for r in &self.rows {
            let shape = r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let status = if r.trainable { "trainable" } else { "frozen" };
            let _ = writeln!(s, "{:<width$}  {:<16}  {:>8}  {status}", r.name, shape, r.count);
        }
        let _ = writeln!(s, "frozen={}", self.frozen());
        let _ = writeln!(s, "trainable={}", self.trainable());
        let _ = writeln!(s, "total={}", self.total());
        let _ = writeln!(s, "trainable_over_total={:.4}", self.ratio_of_total());
        let _ = writeln!(s, "trainable_over_frozen={:.4}", self.ratio_of_frozen());
        s
    }
}

/// Gradients indexed by parameter; frozen parameters never have one.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Grads { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.is_finite())
    }
}

/// A tape plus the binding of store parameters onto it.
///
/// Each parameter is placed on the tape once, on first use, as a leaf that
/// requires a gradient exactly when the parameter is not frozen.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    no_grad: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            no_grad: false,
        }
    }

    /// A graph on which no parameter requires a gradient.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            no_grad: true,
            ..Graph::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), !p.frozen && !self.no_grad);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn grads(&self) -> Grads {
        Grads {
            grads: self
                .bound
                .iter()
                .map(|b| b.and_then(|v| self.tape.grad_tensor(v)))
                .collect(),
        }
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
