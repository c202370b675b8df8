//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt on every forward pass. Parameters live in a
//! [`ParamStore`]; binding the store onto a tape yields one [`Var`] per
//! tensor, and after [`Tape::backward`] the gradients are read back in the
//! same order.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a trainable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t.clone())).collect())
    }

    /// Records every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.0.iter().map(|&v| tape.grad_or_zero(v)).collect()
    }
}

/// Maximum over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor. Non-finite values yield infinity.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    grad_check_params(|tape, bound| f(tape, bound.var(id)), &store, step, None)
}

/// Finite-difference check of a scalar loss against every parameter of a
/// store, or only the flat coordinates listed in `coords`.
pub fn grad_check_params<F>(f: F, store: &ParamStore, step: f64, coords: Option<&[usize]>) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Option<f64> {
        let mut tape = Tape::new();
        let bound = s.bind_frozen(&mut tape);
        f(&mut tape, &bound).ok().map(|v| tape.value(v).item())
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let Ok(loss) = f(&mut tape, &bound) else {
        return f64::INFINITY;
    };
    if tape.backward(loss).is_err() {
        return f64::INFINITY;
    }
    let analytic: Vec<f64> = bound
        .grads(&tape)
        .into_iter()
        .flat_map(Tensor::into_data)
        .collect();
    let base = store.flatten();
    let all: Vec<usize> = (0..base.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &c in coords {
        let mut flat = base.clone();
        flat[c] = base[c] + step;
        probe.set_flat(&flat);
        let plus = eval(&probe);
        flat[c] = base[c] - step;
        probe.set_flat(&flat);
        let minus = eval(&probe);
        let (Some(p), Some(m)) = (plus, minus) else {
            return f64::INFINITY;
        };
        let numeric = (p - m) / (2.0 * step);
        let a = analytic[c];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}
