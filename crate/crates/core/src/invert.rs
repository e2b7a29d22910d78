//! Two-stage inversion with a pre-trained decoder, and the untrained baseline.
//!
//! Stage 1 minimizes `½‖A·G(z; θ̂) − y‖²` over `z` alone from codes drawn from
//! the latent Gaussian. Stage 2 minimizes the same objective over `(z, θ)`
//! jointly, starting from the stage-1 solution, and returns the iterate with
//! the lowest measurement loss it visited.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::decoder::{self, init_params, DecoderParams, Descriptor, LatentCode};
use crate::engine::{evaluate, gradient, LinearMap, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::losses;
use crate::operators::{Measurement, MeasurementOperator};
use crate::optim::{Adam, AdamConfig, Optimizer, RmsProp, RmsPropConfig};
use crate::pretrain::{sample_latent, LatentGaussian};
use crate::seeding;

const LATENT_LEAF: &str = "z";
const RESTART_STREAM: u64 = 0x5157_a47;
const UNTRAINED_STREAM: u64 = 0x0b17_7a1d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub stage1_iterations: usize,
    pub stage1_lr: f64,
    pub stage2_iterations: usize,
    pub stage2_lr: f64,
    pub restarts: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            stage1_iterations: 1250,
            stage1_lr: 5e-2,
            stage2_iterations: 350,
            stage2_lr: 1e-4,
            restarts: 1,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return Err(Error::Config("inversion learning rates must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("at least one restart is required".into()));
        }
        Ok(())
    }

    /// Seed of the latent initialization for restart `r`.
    pub fn restart_seed(&self, r: usize) -> u64 {
        seeding::derive(self.seed, RESTART_STREAM, r as u64)
    }
}

/// Loss trace of one optimization stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageReport {
    /// Objective at the start of every iteration.
    pub losses: Vec<f64>,
    /// Objective at the returned iterate.
    pub final_loss: f64,
    /// Restart that produced the result (stage 1 only).
    pub restart: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub z0: LatentCode<f32>,
    pub theta0: DecoderParams<f32>,
    /// `G(z0; θ0)`.
    pub reconstruction: Tensor<f32>,
    pub stage1: StageReport,
    pub stage2: StageReport,
    pub psnr: Option<f64>,
}

impl InversionResult {
    /// Records the PSNR against a known ground truth.
    pub fn with_truth(mut self, truth: &Tensor<f32>) -> Result<Self> {
        self.psnr = Some(losses::psnr(&self.reconstruction, truth)?);
        Ok(self)
    }

    /// Measurement loss of the returned estimate.
    pub fn final_measurement_loss(&self) -> f64 {
        self.stage2.final_loss
    }
}

/// `½‖A·x − y‖²` for a `1×C×H×W` decoder output `x`.
pub fn measurement_objective(
    tape: &mut Tape<f32>,
    image: Var,
    op: &Arc<MeasurementOperator>,
    y: &Tensor<f32>,
) -> Result<Var> {
    measurement_objective_generic(tape, image, op, y)
}

pub fn measurement_objective_generic<T: crate::engine::Scalar>(
    tape: &mut Tape<T>,
    image: Var,
    op: &Arc<MeasurementOperator>,
    y: &Tensor<T>,
) -> Result<Var>
where
    MeasurementOperator: LinearMap<T>,
{
    let map: Arc<dyn LinearMap<T>> = op.clone();
    let ax = tape.linear(image, map)?;
    let mut shape = vec![1];
    shape.extend_from_slice(y.shape());
    let target = tape.constant(y.clone().reshape(shape)?)?;
    let r = tape.sub(ax, target)?;
    let ss = tape.sum_squares(r)?;
    tape.scale(ss, T::from_f64(0.5))
}

fn check_dims(y: &Measurement<f32>, op: &MeasurementOperator, descriptor: &Descriptor) -> Result<()> {
    if op.input_len() != descriptor.image_len() {
        return Err(Error::Shape(format!(
            "operator expects n={} but the decoder produces {} values",
            op.input_len(),
            descriptor.image_len()
        )));
    }
    if y.values.len() != op.output_len() {
        return Err(Error::Shape(format!(
            "measurement has {} values, operator produces m={}",
            y.values.len(),
            op.output_len()
        )));
    }
    Ok(())
}

fn with_code(theta: &DecoderParams<f32>, z: &LatentCode<f32>, train_theta: bool) -> Result<ParamSet<f32>> {
    let mut p = theta.params.clone();
    p.set_requires_grad(train_theta);
    p.push(LATENT_LEAF, Tensor::new([1, z.dim()], z.values.clone())?, true)?;
    Ok(p)
}

fn objective_fn<'a>(
    descriptor: &'a Descriptor,
    op: &'a Arc<MeasurementOperator>,
    y: &'a Tensor<f32>,
    n_dec: usize,
) -> impl Fn(&mut Tape<f32>, &[Var]) -> Result<Var> + 'a {
    move |tape, vars| {
        let x = decoder::forward(tape, descriptor, &vars[..n_dec], vars[n_dec])?;
        measurement_objective(tape, x, op, y)
    }
}

fn split(params: &ParamSet<f32>, descriptor: Descriptor) -> (DecoderParams<f32>, LatentCode<f32>) {
    let n_dec = params.len() - 1;
    let mut dec = ParamSet::new();
    for l in &params.leaves()[..n_dec] {
        dec.push(l.name.clone(), l.tensor.clone(), true).expect("unique names");
    }
    let z = LatentCode::new(params.leaves()[n_dec].tensor.data().to_vec());
    (DecoderParams { descriptor, params: dec }, z)
}

/// Stage 1: latent search with frozen weights over `cfg.restarts`
/// initializations; returns the code with the lowest final objective.
pub fn solve_latent(
    y: &Measurement<f32>,
    op: &Arc<MeasurementOperator>,
    theta_hat: &DecoderParams<f32>,
    latent_fit: &LatentGaussian,
    cfg: &InversionConfig,
) -> Result<(LatentCode<f32>, StageReport)> {
    cfg.validate()?;
    let d = theta_hat.descriptor;
    check_dims(y, op, &d)?;
    if latent_fit.dim() != d.latent_dim {
        return Err(Error::Shape(format!(
            "latent fit has dimension {}, decoder expects {}",
            latent_fit.dim(),
            d.latent_dim
        )));
    }
    let n_dec = theta_hat.params.len();
    let objective = objective_fn(&d, op, &y.values, n_dec);
    // Restarts run in parallel; the inner loops stay sequential.
    let inner = if cfg.restarts > 1 { ExecMode::Sequential } else { cfg.exec };
    let runs = exec::map_indexed(cfg.exec, cfg.restarts, |r| -> Result<(LatentCode<f32>, StageReport)> {
        let z_init = sample_latent(latent_fit, cfg.restart_seed(r));
        let mut params = with_code(theta_hat, &z_init, false)?;
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.stage1_lr));
        let mut losses = Vec::with_capacity(cfg.stage1_iterations);
        for it in 0..cfg.stage1_iterations {
            let (value, grads) = gradient(&params, inner, &objective).map_err(|e| e.at_iteration(it))?;
            opt.step(&mut params, &grads).map_err(|e| e.at_iteration(it))?;
            losses.push(value as f64);
        }
        let final_loss = evaluate(&params, inner, &objective)? as f64;
        let (_, z) = split(&params, d);
        Ok((
            z,
            StageReport {
                losses,
                final_loss,
                restart: r,
            },
        ))
    });
    let mut best: Option<(LatentCode<f32>, StageReport)> = None;
    for run in runs {
        let run = run?;
        if best.as_ref().is_none_or(|b| run.1.final_loss < b.1.final_loss) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts ≥ 1"))
}

/// Numeric failure during joint refinement; carries the stage-1 estimate.
#[derive(Debug)]
pub struct RefineFailure {
    pub iteration: usize,
    pub fallback: Box<InversionResult>,
    pub source: Error,
}

impl std::fmt::Display for RefineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "joint refinement failed at iteration {}: {}", self.iteration, self.source)
    }
}

impl std::error::Error for RefineFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<RefineFailure> for Error {
    fn from(f: RefineFailure) -> Self {
        f.source.at_iteration(f.iteration)
    }
}

/// Stage 2: joint refinement of `(z, θ)` from `(ẑ, θ̂)`, returning the best
/// iterate by measurement loss (never worse than the starting point).
pub fn refine_joint(
    y: &Measurement<f32>,
    op: &Arc<MeasurementOperator>,
    theta_hat: &DecoderParams<f32>,
    z_hat: &LatentCode<f32>,
    stage1: StageReport,
    cfg: &InversionConfig,
) -> Result<InversionResult, RefineFailure> {
    let d = theta_hat.descriptor;
    let fallback = || -> Result<InversionResult> {
        Ok(InversionResult {
            z0: z_hat.clone(),
            theta0: theta_hat.clone(),
            reconstruction: theta_hat.generate(z_hat, cfg.exec)?,
            stage1: stage1.clone(),
            stage2: StageReport {
                losses: Vec::new(),
                final_loss: stage1.final_loss,
                restart: stage1.restart,
            },
            psnr: None,
        })
    };
    let fail = |iteration: usize, source: Error| match fallback() {
        Ok(fb) => RefineFailure {
            iteration,
            fallback: Box::new(fb),
            source,
        },
        Err(e) => RefineFailure {
            iteration,
            fallback: Box::new(InversionResult {
                z0: z_hat.clone(),
                theta0: theta_hat.clone(),
                reconstruction: Tensor::zeros(d.image_shape().to_vec()),
                stage1: stage1.clone(),
                stage2: StageReport::default(),
                psnr: None,
            }),
            source: e,
        },
    };
    cfg.validate().map_err(|e| fail(0, e))?;
    check_dims(y, op, &d).map_err(|e| fail(0, e))?;

    let n_dec = theta_hat.params.len();
    let objective = objective_fn(&d, op, &y.values, n_dec);
    let mut params = with_code(theta_hat, z_hat, true).map_err(|e| fail(0, e))?;
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.stage2_lr));
    let mut losses = Vec::with_capacity(cfg.stage2_iterations);
    let mut best: Option<(f64, ParamSet<f32>)> = None;
    for it in 0..cfg.stage2_iterations {
        let (value, grads) = gradient(&params, cfg.exec, &objective).map_err(|e| fail(it, e))?;
        let value = value as f64;
        losses.push(value);
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        opt.step(&mut params, &grads).map_err(|e| fail(it, e))?;
    }
    let last = evaluate(&params, cfg.exec, &objective).map_err(|e| fail(cfg.stage2_iterations, e))? as f64;
    let (final_loss, chosen) = match best {
        Some((b, p)) if b <= last => (b, p),
        _ => (last, params),
    };
    let (theta0, z0) = split(&chosen, d);
    let reconstruction = theta0.generate(&z0, cfg.exec).map_err(|e| fail(cfg.stage2_iterations, e))?;
    Ok(InversionResult {
        z0,
        theta0,
        reconstruction,
        stage1,
        stage2: StageReport {
            losses,
            final_loss,
            restart: 0,
        },
        psnr: None,
    })
}

/// Stage 1 followed by stage 2.
pub fn invert(
    y: &Measurement<f32>,
    op: &Arc<MeasurementOperator>,
    theta_hat: &DecoderParams<f32>,
    latent_fit: &LatentGaussian,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    let (z_hat, report) = solve_latent(y, op, theta_hat, latent_fit, cfg)?;
    Ok(refine_joint(y, op, theta_hat, &z_hat, report, cfg)?)
}

/// Iteration budget of the untrained baseline for compression ratio `m/n`.
pub fn untrained_iterations(ratio: f64) -> usize {
    if ratio <= 0.025 {
        350
    } else if ratio <= 0.5 {
        500
    } else {
        1000
    }
}

/// Ratio used to pick the untrained schedule: `m/n` for Gaussian
/// measurements, the top bucket for colorization and identity.
pub fn schedule_ratio(op: &MeasurementOperator) -> f64 {
    match op {
        MeasurementOperator::Gaussian(_) => op.compression_ratio(),
        MeasurementOperator::Luma { .. } | MeasurementOperator::Identity { .. } => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UntrainedConfig {
    pub optimizer: RmsPropConfig,
    /// Overrides the ratio schedule when set.
    pub iterations: Option<usize>,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for UntrainedConfig {
    fn default() -> Self {
        Self {
            optimizer: RmsPropConfig::default(),
            iterations: None,
            exec: ExecMode::default(),
        }
    }
}

/// Untrained-network baseline: fresh weights and a fixed random code; only
/// the weights are optimized (RMSProp with momentum).
pub fn solve_untrained(
    y: &Measurement<f32>,
    op: &Arc<MeasurementOperator>,
    descriptor: Descriptor,
    compression_ratio: f64,
    seed: u64,
) -> Result<InversionResult> {
    solve_untrained_with(y, op, descriptor, compression_ratio, seed, &UntrainedConfig::default())
}

pub fn solve_untrained_with(
    y: &Measurement<f32>,
    op: &Arc<MeasurementOperator>,
    descriptor: Descriptor,
    compression_ratio: f64,
    seed: u64,
    cfg: &UntrainedConfig,
) -> Result<InversionResult> {
    check_dims(y, op, &descriptor)?;
    let theta = init_params::<f32>(seeding::derive(seed, UNTRAINED_STREAM, 0), descriptor)?;
    let z = LatentCode::standard_normal(
        descriptor.latent_dim,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seeding::derive(seed, UNTRAINED_STREAM, 1)),
    );
    let mut params = theta.params.clone();
    params
        .push(LATENT_LEAF, Tensor::new([1, z.dim()], z.values.clone())?, false)?;
    let n_dec = theta.params.len();
    let objective = objective_fn(&descriptor, op, &y.values, n_dec);
    let iterations = cfg.iterations.unwrap_or_else(|| untrained_iterations(compression_ratio));
    let mut opt = RmsProp::new(cfg.optimizer);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let (value, grads) = gradient(&params, cfg.exec, &objective).map_err(|e| e.at_iteration(it))?;
        opt.step(&mut params, &grads).map_err(|e| e.at_iteration(it))?;
        losses.push(value as f64);
    }
    let final_loss = evaluate(&params, cfg.exec, &objective)? as f64;
    let (theta0, z0) = split(&params, descriptor);
    let reconstruction = theta0.generate(&z0, cfg.exec)?;
    Ok(InversionResult {
        z0,
        theta0,
        reconstruction,
        stage1: StageReport::default(),
        stage2: StageReport {
            losses,
            final_loss,
            restart: 0,
        },
        psnr: None,
    })
}
