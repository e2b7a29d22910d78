//! Forward measurement operators `A` and the additive noise model.
//!
//! Images live on the `[−1, 1]` scale. The luma operator is applied on that
//! scale as the plain weighted channel sum, which is exactly the `[0, 1]`
//! luma mapped back to `[−1, 1]` (the weights sum to one), and keeps `A`
//! linear.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{LinearMap, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

/// ITU-R 601-2 luma weights for (R, G, B).
pub const LUMA_COEFFS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMatrix {
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
    /// Row-major `rows × cols` entries drawn i.i.d. from N(0, 1).
    entries: Arc<Vec<f32>>,
}

impl GaussianMatrix {
    pub fn entries(&self) -> &[f32] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementOperator {
    Gaussian(GaussianMatrix),
    Luma {
        height: usize,
        width: usize,
        coeffs: [f64; 3],
    },
    Identity {
        shape: Vec<usize>,
    },
}

/// Seeded `m × n` matrix with i.i.d. standard normal entries.
pub fn gaussian_operator(m: usize, n: usize, seed: u64) -> Result<MeasurementOperator> {
    if m == 0 || n == 0 {
        return Err(Error::Config(format!("gaussian operator needs m, n ≥ 1, got m={m}, n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<f32> = (0..m * n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    Ok(MeasurementOperator::Gaussian(GaussianMatrix {
        rows: m,
        cols: n,
        seed,
        entries: Arc::new(entries),
    }))
}

/// Operator with `round(ratio · n)` rows (at least one).
pub fn gaussian_operator_for_ratio(ratio: f64, n: usize, seed: u64) -> Result<MeasurementOperator> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Config(format!("compression ratio must be positive, got {ratio}")));
    }
    let m = ((ratio * n as f64).round() as usize).max(1);
    gaussian_operator(m, n, seed)
}

pub fn luma_operator(height: usize, width: usize) -> MeasurementOperator {
    MeasurementOperator::Luma {
        height,
        width,
        coeffs: LUMA_COEFFS,
    }
}

pub fn identity_operator(shape: &[usize]) -> MeasurementOperator {
    MeasurementOperator::Identity { shape: shape.to_vec() }
}

impl MeasurementOperator {
    pub fn kind(&self) -> &'static str {
        match self {
            MeasurementOperator::Gaussian(_) => "gaussian",
            MeasurementOperator::Luma { .. } => "luma",
            MeasurementOperator::Identity { .. } => "identity",
        }
    }

    /// Image element count `n`.
    pub fn input_len(&self) -> usize {
        match self {
            MeasurementOperator::Gaussian(g) => g.cols,
            MeasurementOperator::Luma { height, width, .. } => 3 * height * width,
            MeasurementOperator::Identity { shape } => shape.iter().product(),
        }
    }

    /// Measurement count `m`.
    pub fn output_len(&self) -> usize {
        self.output_shape().iter().product()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match self {
            MeasurementOperator::Gaussian(g) => vec![g.rows],
            MeasurementOperator::Luma { height, width, .. } => vec![*height, *width],
            MeasurementOperator::Identity { shape } => shape.clone(),
        }
    }

    /// `m / n`.
    pub fn compression_ratio(&self) -> f64 {
        self.output_len() as f64 / self.input_len() as f64
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, mode: ExecMode) -> Result<Tensor<T>> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "{} operator expects {} values, image has shape {:?}",
                self.kind(),
                self.input_len(),
                x.shape()
            )));
        }
        let mut y = vec![T::zero(); self.output_len()];
        self.forward_slice(x.data(), &mut y, mode);
        Tensor::new(self.output_shape(), y)
    }

    /// `Aᵀ g`, shaped like the image (`3×H×W` for luma, flat otherwise).
    pub fn adjoint<T: Scalar>(&self, g: &Tensor<T>, mode: ExecMode) -> Result<Tensor<T>> {
        if g.len() != self.output_len() {
            return Err(Error::Shape(format!(
                "{} adjoint expects {} values, got shape {:?}",
                self.kind(),
                self.output_len(),
                g.shape()
            )));
        }
        let mut x = vec![T::zero(); self.input_len()];
        self.adjoint_slice(g.data(), &mut x, mode);
        let shape = match self {
            MeasurementOperator::Luma { height, width, .. } => vec![3, *height, *width],
            MeasurementOperator::Identity { shape } => shape.clone(),
            MeasurementOperator::Gaussian(gm) => vec![gm.cols],
        };
        Tensor::new(shape, x)
    }

    fn forward_slice<T: Scalar>(&self, x: &[T], y: &mut [T], mode: ExecMode) {
        match self {
            MeasurementOperator::Gaussian(g) => {
                let a = &g.entries;
                let n = g.cols;
                exec::for_each_chunk_mut(mode, y, row_block(g.rows), |blk, ys| {
                    let first = blk * row_block(g.rows);
                    for (r, out) in ys.iter_mut().enumerate() {
                        *out = dot_f32(&a[(first + r) * n..(first + r + 1) * n], x);
                    }
                });
            }
            MeasurementOperator::Luma { height, width, coeffs } => {
                let plane = height * width;
                let c: [T; 3] = coeffs.map(T::from_f64);
                for (p, out) in y.iter_mut().enumerate() {
                    *out = c[0] * x[p] + c[1] * x[plane + p] + c[2] * x[2 * plane + p];
                }
            }
            MeasurementOperator::Identity { .. } => y.copy_from_slice(x),
        }
    }

    fn adjoint_slice<T: Scalar>(&self, g: &[T], x: &mut [T], mode: ExecMode) {
        match self {
            MeasurementOperator::Gaussian(gm) => {
                let a = &gm.entries;
                let n = gm.cols;
                let block = col_block(n);
                // Every column sums its rows in row order, whatever the split.
                exec::for_each_chunk_mut(mode, x, block, |blk, xs| {
                    let c0 = blk * block;
                    xs.fill(T::zero());
                    for (r, &gr) in g.iter().enumerate() {
                        let row = &a[r * n + c0..r * n + c0 + xs.len()];
                        for (o, &v) in xs.iter_mut().zip(row) {
                            *o += T::from_f32(v) * gr;
                        }
                    }
                });
            }
            MeasurementOperator::Luma { height, width, coeffs } => {
                let plane = height * width;
                for (k, &c) in coeffs.iter().enumerate() {
                    let c = T::from_f64(c);
                    for p in 0..plane {
                        x[k * plane + p] = c * g[p];
                    }
                }
            }
            MeasurementOperator::Identity { .. } => x.copy_from_slice(g),
        }
    }
}

fn row_block(rows: usize) -> usize {
    rows.div_ceil(4 * exec::worker_count()).max(16)
}

fn col_block(cols: usize) -> usize {
    cols.div_ceil(4 * exec::worker_count()).max(256)
}

/// Dot product with eight interleaved accumulators (fixed summation order).
#[inline]
fn dot_f32<T: Scalar>(a: &[f32], x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            let i = c * 8 + l;
            acc[l] += T::from_f32(a[i]) * x[i];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += T::from_f32(a[i]) * x[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

impl<T: Scalar> LinearMap<T> for MeasurementOperator {
    fn name(&self) -> &'static str {
        match self {
            MeasurementOperator::Gaussian(_) => "gaussian_operator",
            MeasurementOperator::Luma { .. } => "luma_operator",
            MeasurementOperator::Identity { .. } => "identity_operator",
        }
    }

    fn input_len(&self) -> usize {
        MeasurementOperator::input_len(self)
    }

    fn output_shape(&self) -> Vec<usize> {
        MeasurementOperator::output_shape(self)
    }

    fn apply_into(&self, x: &[T], y: &mut [T], mode: ExecMode) {
        self.forward_slice(x, y, mode);
    }

    fn adjoint_into(&self, g: &[T], x: &mut [T], mode: ExecMode) {
        self.adjoint_slice(g, x, mode);
    }
}

/// Observed measurements `y0 = A x0 + η`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<T: Scalar> {
    pub values: Tensor<T>,
    pub noise_std: f64,
    pub noise_seed: u64,
}

/// Adds seeded i.i.d. `N(0, noise_std²)` noise; zero std returns `y` unchanged.
pub fn add_noise<T: Scalar>(y: &Tensor<T>, noise_std: f64, seed: u64) -> Result<Measurement<T>> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise std must be ≥ 0, got {noise_std}")));
    }
    let mut values = y.clone();
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in values.data_mut() {
            *v += T::from_f64(noise_std * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(Measurement {
        values,
        noise_std,
        noise_seed: seed,
    })
}

/// Maps a `[−1, 1]` value to `[0, 1]`.
pub fn to_unit(v: f64) -> f64 {
    0.5 * (v + 1.0)
}
