use std::collections::HashMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in a stable insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet { params: Vec::new(), index: HashMap::new() }
    }

    /// Appends a parameter and returns its position.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("parameters", format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.position(name).map(|i| &self.params[i])
    }

    /// Total scalar count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Replaces values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParameterSet<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    "load_parameters",
                    format!("`{}`: {} vs {}", p.name, src.value.shape(), p.value.shape()),
                ));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Records every parameter as a tape leaf; trainable ones collect gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding { vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect() }
    }

    /// Records every parameter as a constant regardless of its trainable flag.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        Binding { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape variables for a [`ParameterSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Pulls this binding's gradients out of `grads`, in parameter order.
    pub fn collect<T: Scalar>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn names_unique_and_order_stable() {
        let mut p = ParameterSet::<f32>::new();
        p.push("b", Tensor::zeros(Shape::SCALAR), true).unwrap();
        p.push("a", Tensor::zeros(Shape::new(1, 2, 1, 1)), false).unwrap();
        assert!(p.push("a", Tensor::zeros(Shape::SCALAR), true).is_err());
        let names: Vec<_> = p.iter().map(|q| q.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(p.numel(), 3);
    }
}
