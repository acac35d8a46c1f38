use std::collections::HashMap;

use edt_tensor::{Real, Tensor};

use crate::error::{EdtError, Result};

/// Named, ordered parameter tensors. The position of a tensor is its
/// parameter id inside a [`edt_tensor::Graph`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(EdtError::Config(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by the same-named entry of `entries`. Fails
    /// with a listing of every missing, extra or mis-shaped tensor.
    pub fn load(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = vec![false; self.len()];
        let mut staged = Vec::new();
        for (name, t) in entries {
            match self.id(&name) {
                None => problems.push(format!("unexpected tensor {name}")),
                Some(id) if self.tensors[id].shape() != t.shape() => {
                    seen[id] = true;
                    problems.push(format!(
                        "{name}: expected shape {:?}, found {:?}",
                        self.tensors[id].shape(),
                        t.shape()
                    ));
                }
                Some(id) => {
                    seen[id] = true;
                    staged.push((id, t));
                }
            }
        }
        for (id, ok) in seen.iter().enumerate() {
            if !ok {
                problems.push(format!("missing tensor {}", self.names[id]));
            }
        }
        if !problems.is_empty() {
            return Err(EdtError::Manifest(problems.join("; ")));
        }
        for (id, t) in staged {
            self.tensors[id] = t;
        }
        Ok(())
    }
}
