//! Named parameter storage and the SGD optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    velocity: Option<Vec<T>>,
}

/// Parameters in a fixed insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Appends a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let index = self.params.len();
        self.by_name.insert(name.clone(), index);
        self.params.push(Param {
            name,
            value,
            grad: None,
            velocity: None,
        });
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set_value(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn accumulate_grad(&mut self, index: usize, grad: &[T]) -> Result<()> {
        let p = &mut self.params[index];
        if grad.len() != p.value.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} elements, expected {}",
                p.name,
                grad.len(),
                p.value.len()
            )));
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a = *a + g),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Same parameters at another precision; gradients and momentum are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    velocity: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// One SGD-with-momentum update: `v = momentum * v + grad; p -= lr * v`.
/// Parameters without a gradient are left untouched. Gradients are cleared.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, lr: T, momentum: T) {
    for p in &mut params.params {
        let Some(grad) = p.grad.take() else { continue };
        let velocity = p
            .velocity
            .get_or_insert_with(|| vec![T::zero(); grad.len()]);
        for (v, &g) in velocity.iter_mut().zip(&grad) {
            *v = momentum * *v + g;
        }
        let updated: Vec<T> = p
            .value
            .data()
            .iter()
            .zip(velocity.iter())
            .map(|(&x, &v)| x - lr * v)
            .collect();
        p.value = Tensor::new(p.value.shape().to_vec(), updated)
            .expect("update preserves parameter shape");
    }
}

/// Polynomial learning-rate decay: `base * (1 - iter/total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (iter.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}
