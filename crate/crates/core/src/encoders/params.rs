use std::collections::HashMap;

use medflip_tensor::{Tape, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind<'a>(&'a self, tape: &Tape, trainable: bool) -> Bound<'a> {
        let vars = self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect();
        Bound { vars, set: self }
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'a> {
    vars: Vec<Var>,
    set: &'a ParamSet,
}

impl<'a> Bound<'a> {
    /// Pairs externally created variables with the names of `set`.
    pub fn from_vars(set: &'a ParamSet, vars: Vec<Var>) -> Self {
        assert_eq!(set.len(), vars.len(), "one variable per parameter");
        Bound { vars, set }
    }

    pub fn var(&self, name: &str) -> &Var {
        let i = self
            .set
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; parameters nothing reached get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }
}
