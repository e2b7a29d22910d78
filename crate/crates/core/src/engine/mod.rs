//! Dense tensors with exact reverse-mode gradients over a fixed primitive set.

pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use norm::NormScope;
pub use params::{GradSet, ParamLeaf, ParamSet};
pub use scalar::{Precision, Scalar};
pub use tape::{Gradients, LinearMap, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Evaluates a scalar objective built on a fresh tape from `params` and
/// returns its value with the gradient of every leaf that requires one.
pub fn gradient<T, F>(params: &ParamSet<T>, mode: ExecMode, objective: F) -> Result<(T, GradSet<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let vars = params.record(&mut tape)?;
    let root = objective(&mut tape, &vars)?;
    let value = tape.value(root);
    if value.len() != 1 {
        return Err(Error::Shape(format!(
            "objective must be scalar, got shape {:?}",
            value.shape()
        )));
    }
    let value = value.item();
    let mut grads = tape.backward(root)?;
    let grads = vars
        .iter()
        .zip(params.leaves())
        .map(|(&v, leaf)| {
            if leaf.requires_grad {
                Some(grads.take(v).unwrap_or_else(|| Tensor::zeros(leaf.tensor.shape().to_vec())))
            } else {
                None
            }
        })
        .collect();
    Ok((value, GradSet { grads }))
}

/// Evaluates a scalar objective without computing gradients.
pub fn evaluate<T, F>(params: &ParamSet<T>, mode: ExecMode, objective: F) -> Result<T>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(mode);
    let vars: Vec<Var> = params
        .leaves()
        .iter()
        .map(|l| tape.constant(l.tensor.clone()))
        .collect::<Result<_>>()?;
    let root = objective(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}
