use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, Graph, NumericsError, Tensor, Var};

/// A named trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Arc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Ordered collection of parameter groups, addressable by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    index: HashMap<String, usize>,
}

/// Leaves created for every group of a store on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        let grad = Tensor::zeros(tensor.shape());
        self.groups.push(ParamGroup {
            name: name.clone(),
            tensor: Arc::new(tensor),
            grad,
            trainable: true,
        });
        self.index.insert(name, self.groups.len() - 1);
        Ok(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [ParamGroup] {
        &mut self.groups
    }

    pub fn position(&self, name: &str) -> Result<usize, NumericsError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&ParamGroup, NumericsError> {
        Ok(&self.groups[self.position(name)?])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor, NumericsError> {
        let i = self.position(name)?;
        Ok(Arc::make_mut(&mut self.groups[i].tensor))
    }

    /// Binds every group as a leaf of `g`, sharing storage.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .groups
                .iter()
                .map(|p| g.leaf_shared(Arc::clone(&p.tensor)))
                .collect(),
        }
    }

    pub fn var(&self, bound: &Bound, name: &str) -> Result<Var, NumericsError> {
        Ok(bound.var(self.position(name)?))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.groups {
            p.grad.fill(0.0);
        }
    }

    /// Fresh zero gradient buffers shaped like the store.
    pub fn grad_buffer(&self) -> Vec<Tensor> {
        self.groups.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect()
    }

    /// Adds the leaf gradients of a backward pass into `buf`.
    pub fn collect_into(&self, bound: &Bound, grads: &Gradients, buf: &mut [Tensor]) {
        for (i, b) in buf.iter_mut().enumerate() {
            if let Some(g) = grads.get(bound.var(i)) {
                b.add_assign(g);
            }
        }
    }

    /// Adds a gradient buffer into the stored gradients.
    pub fn add_grads(&mut self, buf: &[Tensor]) {
        for (p, b) in self.groups.iter_mut().zip(buf) {
            p.grad.add_assign(b);
        }
    }

    pub fn num_values(&self) -> usize {
        self.groups.iter().map(|p| p.tensor.len()).sum()
    }
}
