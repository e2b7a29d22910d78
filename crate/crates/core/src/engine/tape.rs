//! Reverse-mode tape over the fixed primitive set used by the pipeline.

use std::sync::Arc;

use super::conv;
use super::norm::{self, NormCache, NormScope};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Phase, Result};
use crate::exec::{self, ExecMode};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map applied independently to every sample of a batch.
pub trait LinearMap<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Number of elements in one input sample.
    fn input_len(&self) -> usize;
    /// Shape of one output sample.
    fn output_shape(&self) -> Vec<usize>;
    fn apply_into(&self, x: &[T], y: &mut [T], mode: ExecMode);
    fn adjoint_into(&self, g: &[T], x: &mut [T], mode: ExecMode);
}

enum Op<T: Scalar> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    WeightedSum(Var, Tensor<T>),
    ConvTranspose {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        scope: NormScope,
        cache: NormCache<T>,
    },
    Linear {
        input: Var,
        map: Arc<dyn LinearMap<T>>,
    },
    SqDist(Var, Var),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumSquares(_) => "sum_squares",
            Op::WeightedSum(..) => "weighted_sum",
            Op::ConvTranspose { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Linear { map, .. } => map.name(),
            Op::SqDist(..) => "sq_dist",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumSquares(a)
            | Op::WeightedSum(a, _) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::SqDist(a, b) => vec![*a, *b],
            Op::ConvTranspose { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Linear { input, .. } => vec![*input],
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward evaluations so gradients can be pulled back in reverse.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: ExecMode,
}

/// Gradients indexed by [`Var`]; `None` for nodes that need none.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new(ExecMode::default())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: ExecMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        value.check_finite(op.name(), Phase::Forward)?;
        let needs_grad = op.parents().iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf", Phase::Forward)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a))
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    /// Which ReLU inputs are positive, over every ReLU in recording order.
    /// Two points with equal patterns lie on the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&x| x > T::zero()))
            .collect()
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::from_f64(x.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// `Σ w ⊙ a` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.value(a).shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: weights {:?} vs input {:?}",
                weights.shape(),
                self.value(a).shape()
            )));
        }
        let s = self.value(a).dot(&weights);
        self.push(Tensor::scalar(s), Op::WeightedSum(a, weights))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let v = conv::conv_transpose2d(self.value(input), self.value(kernel), stride, padding, self.mode)?;
        self.push(
            v,
            Op::ConvTranspose {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        scope: NormScope,
    ) -> Result<Var> {
        let (v, cache) = norm::batch_norm(self.value(input), self.value(gamma), self.value(beta), eps, scope)?;
        self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                scope,
                cache,
            },
        )
    }

    /// Applies `map` to every sample along the leading axis of `input`.
    pub fn linear(&mut self, input: Var, map: Arc<dyn LinearMap<T>>) -> Result<Var> {
        let x = self.value(input);
        let batch = *x.shape().first().ok_or_else(|| Error::Shape("linear map needs a batch axis".into()))?;
        let n = map.input_len();
        if x.len() != batch * n {
            return Err(Error::Shape(format!(
                "{}: expects {n} values per sample, input shape {:?}",
                map.name(),
                x.shape()
            )));
        }
        let out_shape = map.output_shape();
        let m: usize = out_shape.iter().product();
        let mut y = vec![T::zero(); batch * m];
        for (xs, ys) in x.data().chunks(n).zip(y.chunks_mut(m)) {
            map.apply_into(xs, ys, self.mode);
        }
        let mut shape = vec![batch];
        shape.extend(out_shape);
        let v = Tensor::new(shape, y)?;
        self.push(v, Op::Linear { input, map })
    }

    /// Pairwise squared Euclidean distances between the samples of `a`
    /// (leading axis A) and `b` (leading axis B), giving an `A×B` matrix.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (na, nb) = (lead(x)?, lead(y)?);
        let d = x.len() / na;
        if y.len() / nb != d {
            return Err(Error::Shape(format!(
                "sq_dist: sample sizes differ ({:?} vs {:?})",
                x.shape(),
                y.shape()
            )));
        }
        let (xd, yd) = (x.data(), y.data());
        let rows = exec::map_indexed(self.mode, na, |i| {
            let xi = &xd[i * d..(i + 1) * d];
            (0..nb)
                .map(|j| {
                    xi.iter()
                        .zip(&yd[j * d..(j + 1) * d])
                        .fold(T::zero(), |acc, (&p, &q)| acc + (p - q) * (p - q))
                })
                .collect::<Vec<T>>()
        });
        let v = Tensor::new([na, nb], rows.concat())?;
        self.push(v, Op::SqDist(a, b))
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with(root, Tensor::new(v.shape().to_vec(), vec![T::one()])?)
    }

    /// Pulls `seed` (shaped like `root`) back through the tape.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match root {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.local_backward(&node.op, &node.value, &g)?;
            for (parent, contrib) in contributions {
                if !self.needs(parent) {
                    continue;
                }
                contrib.check_finite(node.op.name(), Phase::Backward)?;
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_backward(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);
        Ok(match op {
            Op::Leaf => vec![],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(&p, &q)| p * q).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(&p, &q)| p * q).collect();
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                vec![(*a, like(*a, d)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = T::from_f64(val(*a).len() as f64);
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / n))]
            }
            Op::SumSquares(a) => {
                let two_g = g.item() + g.item();
                vec![(*a, val(*a).map(|x| two_g * x))]
            }
            Op::WeightedSum(a, w) => {
                let gi = g.item();
                vec![(*a, w.map(|x| gi * x))]
            }
            Op::ConvTranspose {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = conv::conv_transpose2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    *stride,
                    *padding,
                    self.needs(*input),
                    self.needs(*kernel),
                    self.mode,
                )?;
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((*input, dx));
                }
                if let Some(dk) = dk {
                    v.push((*kernel, dk));
                }
                v
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                scope,
                cache,
            } => {
                let (dx, dg, db) = norm::batch_norm_backward(g, val(*gamma), cache, *scope)?;
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Linear { input, map } => {
                let x = val(*input);
                let n = map.input_len();
                let m = g.len() / lead(g)?;
                let mut dx = vec![T::zero(); x.len()];
                for (gs, xs) in g.data().chunks(m).zip(dx.chunks_mut(n)) {
                    map.adjoint_into(gs, xs, self.mode);
                }
                vec![(*input, like(*input, dx)?)]
            }
            Op::SqDist(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (na, nb) = (lead(x)?, lead(y)?);
                let d = x.len() / na;
                let (xd, yd, gd) = (x.data(), y.data(), g.data());
                let two = T::from_f64(2.0);
                let mut out = Vec::new();
                if self.needs(*a) {
                    let rows = exec::map_indexed(self.mode, na, |i| {
                        let mut acc = vec![T::zero(); d];
                        let xi = &xd[i * d..(i + 1) * d];
                        for j in 0..nb {
                            let w = two * gd[i * nb + j];
                            for ((o, &p), &q) in acc.iter_mut().zip(xi).zip(&yd[j * d..(j + 1) * d]) {
                                *o += w * (p - q);
                            }
                        }
                        acc
                    });
                    out.push((*a, like(*a, rows.concat())?));
                }
                if self.needs(*b) {
                    let rows = exec::map_indexed(self.mode, nb, |j| {
                        let mut acc = vec![T::zero(); d];
                        let yj = &yd[j * d..(j + 1) * d];
                        for i in 0..na {
                            let w = two * gd[i * nb + j];
                            for ((o, &q), &p) in acc.iter_mut().zip(yj).zip(&xd[i * d..(i + 1) * d]) {
                                *o -= w * (p - q);
                            }
                        }
                        acc
                    });
                    out.push((*b, like(*b, rows.concat())?));
                }
                out
            }
        })
    }
}

fn lead<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    t.shape()
        .first()
        .copied()
        .ok_or_else(|| Error::Shape("expected a leading batch axis".into()))
}
