//! DCGAN-style generator `G(z; θ)`: a stack of transposed convolutions
//! from a `k`-dimensional code to a `C×R×R` image in `(−1, 1)`.
//!
//! Layer table for resolution `R = 2^(L+2)`:
//!
//! | layer | map                           | kernel/stride/pad | output  |
//! |-------|-------------------------------|-------------------|---------|
//! | 0     | `k → w·2^(L−1)`               | 4 / 1 / 0         | 4×4     |
//! | i     | `w·2^(L−i) → w·2^(L−1−i)`     | 4 / 2 / 1         | 2^(i+2) |
//! | L     | `w → C`                       | 4 / 2 / 1         | R×R     |
//!
//! Every layer but the last is followed by batch norm and ReLU; the last by
//! tanh. Convolutions carry no bias. Batch norm statistics are taken per
//! sample, so a batch of codes produces exactly the images the codes would
//! produce one at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{NormScope, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

pub const KERNEL: usize = 4;
pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Architecture descriptor of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub latent_dim: usize,
    /// Channel count of the last hidden layer (64 for the canonical net).
    pub base_width: usize,
    pub resolution: usize,
    pub channels: usize,
}

impl Default for Descriptor {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            base_width: 64,
            resolution: 64,
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub padding: usize,
    pub normalized: bool,
}

impl Descriptor {
    /// Quarter-width, 32×32 network with a 16-dimensional code.
    pub fn desk() -> Self {
        Self {
            latent_dim: 16,
            base_width: 16,
            resolution: 32,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "decoder resolution must be a power of two ≥ 16, got {}",
                self.resolution
            )));
        }
        if self.latent_dim == 0 || self.base_width == 0 || self.channels == 0 {
            return Err(Error::Config(format!("decoder descriptor has a zero extent: {self:?}")));
        }
        Ok(())
    }

    /// Number of stride-2 upsampling layers.
    fn upsamplings(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 2
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let ups = self.upsamplings();
        let hidden: Vec<usize> = (0..ups).map(|j| self.base_width << (ups - 1 - j)).collect();
        let mut layers = vec![LayerSpec {
            in_channels: self.latent_dim,
            out_channels: hidden[0],
            stride: 1,
            padding: 0,
            normalized: true,
        }];
        for i in 1..=ups {
            let last = i == ups;
            layers.push(LayerSpec {
                in_channels: hidden[i - 1],
                out_channels: if last { self.channels } else { hidden[i] },
                stride: 2,
                padding: 1,
                normalized: !last,
            });
        }
        layers
    }

    /// Number of scalar values in one output image.
    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.resolution, self.resolution]
    }

    /// Total parameter count `P`.
    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| {
                l.in_channels * l.out_channels * KERNEL * KERNEL
                    + if l.normalized { 2 * l.out_channels } else { 0 }
            })
            .sum()
    }
}

/// A latent code `z ∈ R^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T: Scalar> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new([self.values.len()], self.values.clone()).expect("non-empty code")
    }

    /// Standard-normal code.
    pub fn standard_normal(dim: usize, rng: &mut impl Rng) -> Self {
        Self::new((0..dim).map(|_| T::from_f64(rng.sample(StandardNormal))).collect())
    }

    pub fn cast<U: Scalar>(&self) -> LatentCode<U> {
        LatentCode::new(self.values.iter().map(|v| U::from_f64(v.as_f64())).collect())
    }
}

/// The parameters `θ` of a decoder together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T: Scalar> {
    pub descriptor: Descriptor,
    pub params: ParamSet<T>,
}

pub fn weight_name(layer: usize) -> String {
    format!("conv{layer}.weight")
}

pub fn gamma_name(layer: usize) -> String {
    format!("bn{layer}.gamma")
}

pub fn beta_name(layer: usize) -> String {
    format!("bn{layer}.beta")
}

/// Seeded initialization: weights `N(0, 0.02²)`, batch-norm scale
/// `N(1, 0.02²)`, batch-norm shift zero.
pub fn init_params<T: Scalar>(seed: u64, descriptor: Descriptor) -> Result<DecoderParams<T>> {
    descriptor.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize, mean: f64| -> Vec<T> {
        (0..n)
            .map(|_| T::from_f64(mean + INIT_STD * rng.sample::<f64, _>(StandardNormal)))
            .collect()
    };
    let mut params = ParamSet::new();
    for (i, l) in descriptor.layers().iter().enumerate() {
        let shape = [l.in_channels, l.out_channels, KERNEL, KERNEL];
        let n = shape.iter().product();
        params.push(weight_name(i), Tensor::new(shape, normal(n, 0.0))?, true)?;
        if l.normalized {
            params.push(gamma_name(i), Tensor::new([l.out_channels], normal(l.out_channels, 1.0))?, true)?;
            params.push(beta_name(i), Tensor::zeros([l.out_channels]), true)?;
        }
    }
    Ok(DecoderParams { descriptor, params })
}

impl<T: Scalar> DecoderParams<T> {
    /// Checks that every leaf matches the shape the descriptor implies.
    pub fn validate(&self) -> Result<()> {
        self.descriptor.validate()?;
        let mut expected = Vec::new();
        for (i, l) in self.descriptor.layers().iter().enumerate() {
            expected.push((weight_name(i), vec![l.in_channels, l.out_channels, KERNEL, KERNEL]));
            if l.normalized {
                expected.push((gamma_name(i), vec![l.out_channels]));
                expected.push((beta_name(i), vec![l.out_channels]));
            }
        }
        let leaves = self.params.leaves();
        if leaves.len() != expected.len() {
            return Err(Error::Incompatible(format!(
                "descriptor implies {} parameter leaves, found {}",
                expected.len(),
                leaves.len()
            )));
        }
        for (leaf, (name, shape)) in leaves.iter().zip(&expected) {
            if &leaf.name != name || leaf.tensor.shape() != shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "leaf `{}` {:?} does not match expected `{name}` {shape:?}",
                    leaf.name,
                    leaf.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DecoderParams<U> {
        DecoderParams {
            descriptor: self.descriptor,
            params: self.params.cast(),
        }
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.params.set_requires_grad(flag);
    }

    /// Decodes one code into a `C×R×R` image.
    pub fn generate(&self, z: &LatentCode<T>, mode: ExecMode) -> Result<Tensor<T>> {
        let batch = self.generate_batch(std::slice::from_ref(z), mode)?;
        batch.index_axis0(0)
    }

    /// Decodes codes into a `B×C×R×R` batch.
    pub fn generate_batch(&self, zs: &[LatentCode<T>], mode: ExecMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new(mode);
        let vars: Vec<Var> = self
            .params
            .leaves()
            .iter()
            .map(|l| tape.constant(l.tensor.clone()))
            .collect::<Result<_>>()?;
        let codes = Tensor::stack(&zs.iter().map(LatentCode::to_tensor).collect::<Vec<_>>())?;
        let z = tape.constant(codes)?;
        let out = forward(&mut tape, &self.descriptor, &vars, z)?;
        Ok(tape.value(out).clone())
    }
}

/// Records the decoder on `tape`. `params` are the decoder leaves in
/// [`init_params`] order and `z` is a `B×k` batch of codes.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, descriptor: &Descriptor, params: &[Var], z: Var) -> Result<Var> {
    let zs = tape.value(z).shape().to_vec();
    if zs.len() != 2 || zs[1] != descriptor.latent_dim {
        return Err(Error::Shape(format!(
            "decoder expects B×{} codes, got {zs:?}",
            descriptor.latent_dim
        )));
    }
    let mut h = tape.reshape(z, &[zs[0], zs[1], 1, 1])?;
    let mut next = params.iter().copied();
    let mut take = || {
        next.next()
            .ok_or_else(|| Error::Shape("decoder parameter list too short".into()))
    };
    let eps = T::from_f64(BN_EPS);
    for l in descriptor.layers() {
        let w = take()?;
        h = tape.conv_transpose2d(h, w, l.stride, l.padding)?;
        if l.normalized {
            let (g, b) = (take()?, take()?);
            h = tape.batch_norm(h, g, b, eps, NormScope::PerSample)?;
            h = tape.relu(h)?;
        } else {
            h = tape.tanh(h)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_layer_table() {
        let d = Descriptor::default();
        let chans: Vec<(usize, usize)> = d.layers().iter().map(|l| (l.in_channels, l.out_channels)).collect();
        assert_eq!(chans, vec![(128, 512), (512, 256), (256, 128), (128, 64), (64, 3)]);
    }

    #[test]
    fn rejects_non_power_of_two() {
        let d = Descriptor {
            resolution: 48,
            ..Descriptor::default()
        };
        assert!(matches!(init_params::<f32>(0, d), Err(Error::Config(_))));
        let d = Descriptor {
            resolution: 8,
            ..Descriptor::default()
        };
        assert!(init_params::<f32>(0, d).is_err());
    }

    #[test]
    fn beta_is_zero_and_seed_is_deterministic() {
        let a = init_params::<f32>(9, Descriptor::desk()).unwrap();
        let b = init_params::<f32>(9, Descriptor::desk()).unwrap();
        assert_eq!(a, b);
        for l in a.params.leaves().iter().filter(|l| l.name.ends_with(".beta")) {
            assert!(l.tensor.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(a.params.count(), Descriptor::desk().parameter_count());
    }

    #[test]
    fn code_dimension_checked() {
        let p = init_params::<f32>(0, Descriptor::desk()).unwrap();
        let z = LatentCode::new(vec![0.0f32; 5]);
        assert!(matches!(p.generate(&z, ExecMode::Sequential), Err(Error::Shape(_))));
    }
}
