//! Pre-training losses (ℓ2 and Gaussian-kernel MMD) and image metrics.
//!
//! Each loss has a direct evaluation over image lists and a tape version
//! over a `B×…` batch that supplies gradients.

use serde::{Deserialize, Serialize};

use crate::engine::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

/// Bandwidth of the Gaussian kernel `k(x1, x2) = exp(−‖x1 − x2‖² / α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub alpha: f64,
}

impl KernelConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha.is_finite() {
            Ok(Self { alpha })
        } else {
            Err(Error::Config(format!("kernel bandwidth must be positive, got {alpha}")))
        }
    }

    /// Median of the pairwise squared distances among `shots`.
    pub fn median_heuristic<T: Scalar>(shots: &[Tensor<T>]) -> Result<Self> {
        if shots.len() < 2 {
            return Err(Error::Degenerate("median heuristic needs at least two shots".into()));
        }
        let mut d: Vec<f64> = Vec::new();
        for i in 0..shots.len() {
            for j in i + 1..shots.len() {
                d.push(sq_dist(&shots[i], &shots[j])?);
            }
        }
        d.sort_by(f64::total_cmp);
        let n = d.len();
        let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
        if median <= 0.0 {
            return Err(Error::Degenerate("shots are identical; median distance is zero".into()));
        }
        Self::new(median)
    }
}

/// Normalization of the MMD estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    /// Within-set sums over ordered pairs `i ≠ i'`, cross sum over ordered
    /// pairs `i ≠ j`, every sum scaled by `1/C(S,2)` (cross term by `2/C(S,2)`).
    #[default]
    Literal,
    /// The standard unbiased MMD² estimator: within-set sums scaled by
    /// `1/(S(S−1))`, full cross sum by `2/S²`.
    Unbiased,
}

fn sq_dist<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum())
}

fn check_pairs<T: Scalar>(outputs: &[Tensor<T>], shots: &[Tensor<T>]) -> Result<()> {
    if outputs.len() != shots.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} shots",
            outputs.len(),
            shots.len()
        )));
    }
    for (o, s) in outputs.iter().zip(shots) {
        if o.shape() != s.shape() {
            return Err(Error::Shape(format!("output {:?} vs shot {:?}", o.shape(), s.shape())));
        }
    }
    Ok(())
}

/// `(1/S) Σ_i ‖outputs_i − shots_i‖²`.
pub fn l2_loss<T: Scalar>(outputs: &[Tensor<T>], shots: &[Tensor<T>]) -> Result<f64> {
    check_pairs(outputs, shots)?;
    if outputs.is_empty() {
        return Err(Error::Degenerate("l2 loss over zero shots".into()));
    }
    let total: f64 = outputs.iter().zip(shots).map(|(o, s)| sq_dist(o, s)).sum::<Result<f64>>()?;
    Ok(total / outputs.len() as f64)
}

pub fn gaussian_kernel<T: Scalar>(x1: &Tensor<T>, x2: &Tensor<T>, cfg: KernelConfig) -> Result<f64> {
    Ok((-sq_dist(x1, x2)? / cfg.alpha).exp())
}

pub fn mmd_loss<T: Scalar>(outputs: &[Tensor<T>], shots: &[Tensor<T>], cfg: KernelConfig) -> Result<f64> {
    mmd_loss_with(outputs, shots, cfg, MmdEstimator::Literal)
}

pub fn mmd_loss_with<T: Scalar>(
    outputs: &[Tensor<T>],
    shots: &[Tensor<T>],
    cfg: KernelConfig,
    estimator: MmdEstimator,
) -> Result<f64> {
    check_pairs(outputs, shots)?;
    let s = outputs.len();
    if s < 2 {
        return Err(Error::Degenerate(format!("MMD needs at least 2 samples per set, got {s}")));
    }
    let k = |a: &Tensor<T>, b: &Tensor<T>| gaussian_kernel(a, b, cfg);
    let (mut gg, mut xx, mut gx_off, mut gx_all) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..s {
        for j in 0..s {
            let cross = k(&outputs[i], &shots[j])?;
            gx_all += cross;
            if i != j {
                gg += k(&outputs[i], &outputs[j])?;
                xx += k(&shots[i], &shots[j])?;
                gx_off += cross;
            }
        }
    }
    let sf = s as f64;
    Ok(match estimator {
        MmdEstimator::Literal => {
            let pairs = sf * (sf - 1.0) / 2.0;
            (gg + xx - 2.0 * gx_off) / pairs
        }
        MmdEstimator::Unbiased => (gg + xx) / (sf * (sf - 1.0)) - 2.0 * gx_all / (sf * sf),
    })
}

/// Tape version of [`l2_loss`]; `outputs` is a `B×…` batch and `shots`
/// the matching constant batch.
pub fn l2_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, outputs: Var, shots: &Tensor<T>) -> Result<Var> {
    let shape = tape.value(outputs).shape().to_vec();
    if shape != shots.shape() || shape.is_empty() {
        return Err(Error::Shape(format!("outputs {shape:?} vs shots {:?}", shots.shape())));
    }
    let target = tape.constant(shots.clone())?;
    let diff = tape.sub(outputs, target)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, T::from_f64(1.0 / shape[0] as f64))
}

/// Tape version of [`mmd_loss_with`].
pub fn mmd_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: Var,
    shots: &Tensor<T>,
    cfg: KernelConfig,
    estimator: MmdEstimator,
) -> Result<Var> {
    let shape = tape.value(outputs).shape().to_vec();
    if shape != shots.shape() || shape.is_empty() {
        return Err(Error::Shape(format!("outputs {shape:?} vs shots {:?}", shots.shape())));
    }
    let s = shape[0];
    if s < 2 {
        return Err(Error::Degenerate(format!("MMD needs at least 2 samples per set, got {s}")));
    }
    let sf = s as f64;
    let (w_within, w_cross_off, w_cross_diag) = match estimator {
        MmdEstimator::Literal => {
            let pairs = sf * (sf - 1.0) / 2.0;
            (1.0 / pairs, -2.0 / pairs, 0.0)
        }
        MmdEstimator::Unbiased => (1.0 / (sf * (sf - 1.0)), -2.0 / (sf * sf), -2.0 / (sf * sf)),
    };
    let weights = |off: f64, diag: f64| {
        let data = (0..s * s)
            .map(|idx| T::from_f64(if idx / s == idx % s { diag } else { off }))
            .collect();
        Tensor::new([s, s], data).expect("square weights")
    };
    let shots_list: Vec<Tensor<T>> = (0..s).map(|i| shots.index_axis0(i)).collect::<Result<_>>()?;
    let mut xx = 0.0;
    for i in 0..s {
        for j in 0..s {
            if i != j {
                xx += gaussian_kernel(&shots_list[i], &shots_list[j], cfg)?;
            }
        }
    }
    let neg_inv_alpha = T::from_f64(-1.0 / cfg.alpha);
    let target = tape.constant(shots.clone())?;

    let d_gg = tape.sq_dist(outputs, outputs)?;
    let e_gg = tape.scale(d_gg, neg_inv_alpha)?;
    let k_gg = tape.exp(e_gg)?;
    let within = tape.weighted_sum(k_gg, weights(w_within, 0.0))?;

    let d_gx = tape.sq_dist(outputs, target)?;
    let e_gx = tape.scale(d_gx, neg_inv_alpha)?;
    let k_gx = tape.exp(e_gx)?;
    let cross = tape.weighted_sum(k_gx, weights(w_cross_off, w_cross_diag))?;

    let total = tape.add(within, cross)?;
    tape.add_scalar(total, T::from_f64(w_within * xx))
}

/// Mean squared error after mapping both images from `[−1, 1]` to `[0, 1]`.
pub fn mse_unit<T: Scalar>(estimate: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} vs truth {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    // ((a+1)/2 − (b+1)/2)² = (a − b)² / 4
    Ok(sq_dist(estimate, truth)? / (4.0 * estimate.len() as f64))
}

/// Peak signal-to-noise ratio on the `[0, 1]` scale with peak 1, capped at
/// 100 dB for (near-)identical images.
pub fn psnr<T: Scalar>(estimate: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    let mse = mse_unit(estimate, truth)?;
    Ok(if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    })
}
