use std::collections::HashMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named, ordered parameter tree. Names are dotted paths such as
/// `enc0.s0.conv.weight`; insertion order is the serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

/// Parameters recorded as tape leaves for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables that stand for a store's parameters, in store
    /// order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter on the tape as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect(),
        }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Adds the gradients of one backward pass onto the stored gradients.
    pub fn accumulate(&mut self, bound: &Bound, grads: &mut Gradients<T>) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.take(v) {
                p.grad.add_assign(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Copies values from `other` for every parameter that exists in both
    /// stores under the same name; shapes must agree.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(&j) = other.index.get(&p.name) {
                let src = &other.params[j].value;
                if src.shape() != p.value.shape() {
                    return Err(Error::ParamMismatch {
                        name: p.name.clone(),
                        detail: format!("shape {:?} vs {:?}", p.value.shape(), src.shape()),
                    });
                }
                p.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Per-entry listing: name, shape, element count.
    pub fn table(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.numel()))
            .collect()
    }

    /// Parameter counts aggregated by the first `depth` path components,
    /// in first-appearance order.
    pub fn breakdown(&self, depth: usize) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in &self.params {
            let key = p.name.split('.').take(depth.max(1)).collect::<Vec<_>>().join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.value.numel(),
                None => out.push((key, p.value.numel())),
            }
        }
        out
    }
}
