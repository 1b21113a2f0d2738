use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Element, Tensor};
use super::NumericsError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model parameters in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    /// Registers a parameter. Panics on a duplicate name: names are fixed by model code.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites every registered parameter from `source` by name.
    ///
    /// Every name must be present with an identical shape; extra entries in
    /// `source` are ignored.
    pub fn load_from<'a>(&mut self, source: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Result<(), NumericsError> {
        let lookup: HashMap<&str, &Tensor<T>> = source.into_iter().collect();
        let missing: Vec<String> = self.names.iter().filter(|n| !lookup.contains_key(n.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(NumericsError::MissingTensors(missing));
        }
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup[name.as_str()];
            if src.shape() != slot.shape() {
                return Err(NumericsError::TensorShape {
                    name: name.clone(),
                    expected: slot.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *slot = src.clone();
        }
        Ok(())
    }
}

/// A tape paired with the parameters model code reads from.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T: Element> {
    pub tape: &'a Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        Self { tape, params }
    }

    /// Parameter as a gradient leaf.
    pub fn p(&self, id: ParamId) -> Var<'a, T> {
        self.tape.bind_param(id.0, self.params.get(id))
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'a, T> {
        self.tape.constant(value)
    }
}

/// Sums parameter gradients over several backward passes (mini-batches).
#[derive(Debug)]
pub struct GradAccumulator<T> {
    grads: Vec<Option<Tensor<T>>>,
    passes: usize,
}

impl<T: Element> GradAccumulator<T> {
    pub fn new(num_params: usize) -> Self {
        Self { grads: (0..num_params).map(|_| None).collect(), passes: 0 }
    }

    pub fn add(&mut self, grads: &Gradients<T>) {
        for i in grads.param_indices() {
            if let Some(g) = grads.param(i) {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        self.passes += 1;
    }

    /// Mean gradient per parameter; `None` where a parameter never took part.
    pub fn mean(mut self) -> Vec<Option<Tensor<T>>> {
        if self.passes > 1 {
            let s = T::one() / T::from_usize(self.passes).unwrap();
            for g in self.grads.iter_mut().flatten() {
                g.scale_assign(s);
            }
        }
        self.grads
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}
