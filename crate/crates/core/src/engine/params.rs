use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLeaf<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub requires_grad: bool,
}

/// Ordered parameter collection with unique leaf names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Scalar> {
    leaves: Vec<ParamLeaf<T>>,
}

/// Gradients aligned with the leaves of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<T: Scalar> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn get(&self, i: usize) -> Option<&Tensor<T>> {
        self.grads.get(i).and_then(Option::as_ref)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }

    /// Flattened view of every present gradient, in leaf order.
    pub fn flatten(&self) -> Vec<T> {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { leaves: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>, requires_grad: bool) -> Result<()> {
        let name = name.into();
        if self.leaves.iter().any(|l| l.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.leaves.push(ParamLeaf {
            name,
            tensor,
            requires_grad,
        });
        Ok(())
    }

    /// Appends every leaf of `other` (names must stay unique).
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for l in other.leaves {
            self.push(l.name, l.tensor, l.requires_grad)?;
        }
        Ok(())
    }

    pub fn leaves(&self) -> &[ParamLeaf<T>] {
        &self.leaves
    }

    pub fn leaves_mut(&mut self) -> &mut [ParamLeaf<T>] {
        &mut self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamLeaf<T>> {
        self.leaves.iter().find(|l| l.name == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.leaves.iter().position(|l| l.name == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.leaves.iter().map(|l| l.tensor.len()).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for l in &mut self.leaves {
            l.requires_grad = flag;
        }
    }

    /// Records every leaf on `tape`, returning the handles in leaf order.
    pub fn record(&self, tape: &mut Tape<T>) -> Result<Vec<Var>> {
        self.leaves
            .iter()
            .map(|l| tape.leaf(l.tensor.clone(), l.requires_grad))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            leaves: self
                .leaves
                .iter()
                .map(|l| ParamLeaf {
                    name: l.name.clone(),
                    tensor: l.tensor.cast(),
                    requires_grad: l.requires_grad,
                })
                .collect(),
        }
    }

    /// Flattened values of all leaves, in order.
    pub fn flatten(&self) -> Vec<T> {
        self.leaves
            .iter()
            .flat_map(|l| l.tensor.data().iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.push("w", Tensor::zeros([2]), true).unwrap();
        assert!(p.push("w", Tensor::zeros([3]), true).is_err());
        assert_eq!(p.count(), 2);
    }
}
