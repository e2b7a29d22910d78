//! Batch normalization with per-call statistics (no running averages).

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which elements share one set of normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormScope {
    /// Per channel over `B×H×W`.
    Batch,
    /// Per channel and per sample over `H×W`, i.e. every sample is
    /// normalized as a batch of one.
    PerSample,
}

/// Saved forward quantities needed by the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    /// One entry per statistics group, ordered `[group_sample][channel]`.
    pub inv_std: Vec<T>,
}

struct Layout {
    batch: usize,
    channels: usize,
    plane: usize,
}

fn layout<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Layout> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("batch_norm input must be B×C×H×W, got {s:?}")));
    }
    if gamma.shape() != [s[1]] || beta.shape() != [s[1]] {
        return Err(Error::Shape(format!(
            "batch_norm gamma {:?} / beta {:?} must have {} entries",
            gamma.shape(),
            beta.shape(),
            s[1]
        )));
    }
    Ok(Layout {
        batch: s[0],
        channels: s[1],
        plane: s[2] * s[3],
    })
}

/// Indices `(sample, offset)` of channel `c` within statistics group `grp`.
fn group_samples(l: &Layout, scope: NormScope, grp: usize) -> std::ops::Range<usize> {
    match scope {
        NormScope::Batch => 0..l.batch,
        NormScope::PerSample => grp..grp + 1,
    }
}

fn group_count(l: &Layout, scope: NormScope) -> usize {
    match scope {
        NormScope::Batch => 1,
        NormScope::PerSample => l.batch,
    }
}

pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    scope: NormScope,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let l = layout(input, gamma, beta)?;
    let x = input.data();
    let mut out = Tensor::zeros(input.shape().to_vec());
    let mut normalized = Tensor::zeros(input.shape().to_vec());
    let groups = group_count(&l, scope);
    let mut inv_std = Vec::with_capacity(groups * l.channels);
    for grp in 0..groups {
        for c in 0..l.channels {
            let samples = group_samples(&l, scope, grp);
            let count = T::from_f64((samples.len() * l.plane) as f64);
            let offsets = || samples.clone().map(|b| (b * l.channels + c) * l.plane);
            let mut sum = T::zero();
            for o in offsets() {
                sum += x[o..o + l.plane].iter().copied().sum::<T>();
            }
            let mean = sum / count;
            let mut var = T::zero();
            for o in offsets() {
                for &v in &x[o..o + l.plane] {
                    var += (v - mean) * (v - mean);
                }
            }
            var = var / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let (gm, bt) = (gamma.data()[c], beta.data()[c]);
            for o in offsets() {
                for i in o..o + l.plane {
                    let h = (x[i] - mean) * inv;
                    normalized.data_mut()[i] = h;
                    out.data_mut()[i] = gm * h + bt;
                }
            }
        }
    }
    Ok((out, NormCache { normalized, inv_std }))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    scope: NormScope,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let l = layout(grad_out, gamma, gamma)?;
    let dy = grad_out.data();
    let h = cache.normalized.data();
    let mut dx = Tensor::zeros(grad_out.shape().to_vec());
    let mut dgamma = Tensor::zeros([l.channels]);
    let mut dbeta = Tensor::zeros([l.channels]);
    for grp in 0..group_count(&l, scope) {
        for c in 0..l.channels {
            let samples = group_samples(&l, scope, grp);
            let count = T::from_f64((samples.len() * l.plane) as f64);
            let offsets = || samples.clone().map(|b| (b * l.channels + c) * l.plane);
            let (mut sum_g, mut sum_gh) = (T::zero(), T::zero());
            for o in offsets() {
                for i in o..o + l.plane {
                    sum_g += dy[i];
                    sum_gh += dy[i] * h[i];
                }
            }
            dgamma.data_mut()[c] += sum_gh;
            dbeta.data_mut()[c] += sum_g;
            let scale = gamma.data()[c] * cache.inv_std[grp * l.channels + c] / count;
            for o in offsets() {
                for i in o..o + l.plane {
                    dx.data_mut()[i] = scale * (count * dy[i] - sum_g - h[i] * sum_gh);
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::full([c], 1.0)
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full([2, 3, 2, 2], 4.2);
        let (y, _) = batch_norm(&x, &ones(3), &Tensor::zeros([3]), 1e-5, NormScope::Batch).unwrap();
        assert!(y.data().iter().all(|v| v.abs() <= 1e-5f64.sqrt()));
    }

    #[test]
    fn standardized_input_is_fixed_point() {
        // Per channel over B×H×W: values ±1 with mean 0, variance 1.
        let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = Tensor::from_f64([2, 2, 2, 2], &data).unwrap();
        let (y, _) = batch_norm(&x, &ones(2), &Tensor::zeros([2]), 1e-12, NormScope::Batch).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn per_sample_equals_batch_of_one() {
        let data: Vec<f64> = (0..36).map(|i| ((i * 37 % 11) as f64) * 0.3 - 1.0).collect();
        let x = Tensor::from_f64([2, 2, 3, 3], &data).unwrap();
        let gamma = Tensor::from_f64([2], &[0.9, 1.3]).unwrap();
        let beta = Tensor::from_f64([2], &[0.1, -0.2]).unwrap();
        let (y, _) = batch_norm(&x, &gamma, &beta, 1e-5, NormScope::PerSample).unwrap();
        for b in 0..2 {
            let xb = x.index_axis0(b).unwrap().reshape([1, 2, 3, 3]).unwrap();
            let (yb, _) = batch_norm(&xb, &gamma, &beta, 1e-5, NormScope::Batch).unwrap();
            assert_eq!(yb.data(), y.index_axis0(b).unwrap().data());
        }
    }

    #[test]
    fn gamma_shape_checked() {
        let x = Tensor::<f32>::zeros([1, 3, 2, 2]);
        assert!(batch_norm(&x, &Tensor::zeros([2]), &Tensor::zeros([3]), 1e-5, NormScope::Batch).is_err());
    }
}
