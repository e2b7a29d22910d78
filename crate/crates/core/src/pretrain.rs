//! Joint pre-training of decoder weights and per-shot latent codes, and the
//! diagonal Gaussian fitted to the learned codes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::decoder::{self, init_params, DecoderParams, Descriptor, LatentCode};
use crate::engine::{gradient, ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::losses::{self, KernelConfig, MmdEstimator};
use crate::optim::{Adam, AdamConfig, Optimizer};

pub const LATENT_LEAF: &str = "latents";
pub const DEFAULT_STD_FLOOR: f64 = 0.1;

/// The low-shot training images.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSet {
    pub images: Vec<Tensor<f32>>,
    /// Identifier (e.g. content digest) of every image, in order.
    pub ids: Vec<String>,
    /// Free-form record of how the images were prepared.
    pub preprocessing: String,
}

impl ShotSet {
    pub fn new(images: Vec<Tensor<f32>>, ids: Vec<String>, preprocessing: impl Into<String>) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Config("a shot set needs at least one image".into()))?;
        if ids.len() != images.len() {
            return Err(Error::Config(format!("{} ids for {} images", ids.len(), images.len())));
        }
        for (img, id) in images.iter().zip(&ids) {
            if img.shape() != first.shape() {
                return Err(Error::Shape(format!(
                    "shot `{id}` has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            if img.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Config(format!("shot `{id}` has values outside [-1, 1]")));
            }
        }
        Ok(Self {
            images,
            ids,
            preprocessing: preprocessing.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// SHA-256 over the ordered ids.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L2,
    Mmd,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L2 => "l2",
            LossKind::Mmd => "mmd",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(LossKind::L2),
            "mmd" => Ok(LossKind::Mmd),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected l2 or mmd)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub iterations: usize,
    pub lr: f64,
    pub descriptor: Descriptor,
    /// Kernel bandwidth for the MMD loss; `None` selects the median heuristic.
    pub kernel: Option<KernelConfig>,
    pub estimator: MmdEstimator,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::L2,
            iterations: 50_000,
            lr: 1e-3,
            descriptor: Descriptor::default(),
            kernel: None,
            estimator: MmdEstimator::Literal,
            seed: 0,
            exec: ExecMode::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("pre-training needs at least one iteration".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.descriptor.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainResult {
    pub theta_hat: DecoderParams<f32>,
    pub latents: Vec<LatentCode<f32>>,
    /// Loss at the start of every iteration.
    pub loss_history: Vec<f64>,
    pub kernel: Option<KernelConfig>,
}

impl PretrainResult {
    pub fn to_checkpoint(&self, cfg: &PretrainConfig, shots: &ShotSet) -> Checkpoint<f32> {
        let mut ck = Checkpoint::new(self.theta_hat.clone(), self.latents.clone());
        ck.metadata = training_manifest(cfg, shots, self.kernel);
        if let Some(last) = self.loss_history.last() {
            ck.metadata.insert("final_loss".into(), format!("{last:e}"));
        }
        ck
    }
}

fn training_manifest(cfg: &PretrainConfig, shots: &ShotSet, kernel: Option<KernelConfig>) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("loss".into(), cfg.loss.to_string());
    m.insert("iterations".into(), cfg.iterations.to_string());
    m.insert("lr".into(), format!("{:e}", cfg.lr));
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert("shots".into(), shots.len().to_string());
    m.insert("shots_digest".into(), shots.digest());
    m.insert("preprocessing".into(), shots.preprocessing.clone());
    if let Some(k) = kernel {
        m.insert("kernel_alpha".into(), format!("{:e}", k.alpha));
        m.insert(
            "mmd_estimator".into(),
            match cfg.estimator {
                MmdEstimator::Literal => "literal",
                MmdEstimator::Unbiased => "unbiased",
            }
            .into(),
        );
    }
    m
}

/// Numeric failure during pre-training, with the state before the failing step.
#[derive(Debug)]
pub struct PretrainFailure {
    pub iteration: usize,
    pub last_good: Box<Checkpoint<f32>>,
    pub source: Error,
}

impl std::fmt::Display for PretrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "pre-training failed at iteration {}: {}", self.iteration, self.source)
    }
}

impl std::error::Error for PretrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<PretrainFailure> for Error {
    fn from(f: PretrainFailure) -> Self {
        f.source.at_iteration(f.iteration)
    }
}

/// Full-batch Adam over `(θ, z_1 … z_S)` minimizing the ℓ2 or MMD loss.
pub fn pretrain(shots: &ShotSet, cfg: &PretrainConfig) -> Result<PretrainResult, PretrainFailure> {
    let fail = |source: Error| PretrainFailure {
        iteration: 0,
        last_good: Box::new(Checkpoint::new(
            DecoderParams {
                descriptor: cfg.descriptor,
                params: ParamSet::new(),
            },
            Vec::new(),
        )),
        source,
    };
    cfg.validate().map_err(fail)?;
    let s = shots.len();
    let d = cfg.descriptor;
    let expected = d.image_shape();
    if shots.images[0].shape() != expected {
        return Err(fail(Error::Shape(format!(
            "shots have shape {:?}, decoder produces {expected:?}",
            shots.images[0].shape()
        ))));
    }
    let kernel = match cfg.loss {
        LossKind::L2 => None,
        LossKind::Mmd => {
            if s < 2 {
                return Err(fail(Error::Degenerate(format!("MMD pre-training needs S ≥ 2, got {s}"))));
            }
            Some(match cfg.kernel {
                Some(k) => k,
                None => KernelConfig::median_heuristic(&shots.images).map_err(fail)?,
            })
        }
    };
    let target = Tensor::stack(&shots.images).map_err(fail)?;

    let decoder = init_params::<f32>(cfg.seed, d).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1a7e_47c0_de00);
    let codes: Vec<f32> = (0..s * d.latent_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let mut params = decoder.params.clone();
    let n_dec = params.len();
    params
        .push(LATENT_LEAF, Tensor::new([s, d.latent_dim], codes).map_err(fail)?, true)
        .map_err(fail)?;

    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let step = gradient(&params, cfg.exec, |tape, vars| {
            let out = decoder::forward(tape, &d, &vars[..n_dec], vars[n_dec])?;
            match kernel {
                None => losses::l2_loss_on_tape(tape, out, &target),
                Some(k) => losses::mmd_loss_on_tape(tape, out, &target, k, cfg.estimator),
            }
        })
        .and_then(|(value, grads)| {
            opt.step(&mut params, &grads)?;
            Ok(value)
        });
        match step {
            Ok(value) => history.push(value as f64),
            Err(source) => {
                let (theta, latents) = split(&params, n_dec, d);
                let mut ck = Checkpoint::new(theta, latents);
                ck.optimizer = opt.state_records(&params);
                ck.metadata = training_manifest(cfg, shots, kernel);
                return Err(PretrainFailure {
                    iteration: it,
                    last_good: Box::new(ck),
                    source,
                });
            }
        }
        if it % 1000 == 0 {
            log::debug!("pretrain {} S={s} iter {it}: loss {:.6e}", cfg.loss, history[it]);
        }
    }
    let (theta_hat, latents) = split(&params, n_dec, d);
    Ok(PretrainResult {
        theta_hat,
        latents,
        loss_history: history,
        kernel,
    })
}

fn split(params: &ParamSet<f32>, n_dec: usize, descriptor: Descriptor) -> (DecoderParams<f32>, Vec<LatentCode<f32>>) {
    let mut dec = ParamSet::new();
    for l in &params.leaves()[..n_dec] {
        dec.push(l.name.clone(), l.tensor.clone(), true).expect("unique names");
    }
    let table = &params.leaves()[n_dec].tensor;
    let latents = table
        .data()
        .chunks(descriptor.latent_dim)
        .map(|c| LatentCode::new(c.to_vec()))
        .collect();
    (DecoderParams { descriptor, params: dec }, latents)
}

/// Diagonal Gaussian fitted to learned codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    /// Per-dimension standard deviation after flooring.
    pub std: Vec<f64>,
    /// Sample standard deviation before flooring (zero when S = 1).
    pub raw_std: Vec<f64>,
    pub floor: f64,
}

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            raw_std: vec![1.0; dim],
            floor: 0.0,
        }
    }
}

pub fn fit_latent_gaussian<T: Scalar>(latents: &[LatentCode<T>]) -> Result<LatentGaussian> {
    fit_latent_gaussian_with_floor(latents, DEFAULT_STD_FLOOR)
}

/// Per-dimension sample mean and sample standard deviation (`S − 1`
/// denominator), each std raised to at least `floor`.
pub fn fit_latent_gaussian_with_floor<T: Scalar>(latents: &[LatentCode<T>], floor: f64) -> Result<LatentGaussian> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Degenerate("cannot fit a Gaussian to zero codes".into()))?;
    let k = first.dim();
    if latents.iter().any(|z| z.dim() != k) {
        return Err(Error::Shape("latent codes differ in dimension".into()));
    }
    let s = latents.len() as f64;
    let mut mean = vec![0.0; k];
    for z in latents {
        for (m, v) in mean.iter_mut().zip(&z.values) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= s);
    let raw_std: Vec<f64> = if latents.len() < 2 {
        vec![0.0; k]
    } else {
        (0..k)
            .map(|i| {
                let ss: f64 = latents.iter().map(|z| (z.values[i].as_f64() - mean[i]).powi(2)).sum();
                (ss / (s - 1.0)).sqrt()
            })
            .collect()
    };
    let std = raw_std.iter().map(|&v| v.max(floor)).collect();
    Ok(LatentGaussian {
        mean,
        std,
        raw_std,
        floor,
    })
}

/// `z = mean + std ⊙ ε` with seeded standard-normal `ε`.
pub fn sample_latent(fit: &LatentGaussian, seed: u64) -> LatentCode<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LatentCode::new(
        fit.mean
            .iter()
            .zip(&fit.std)
            .map(|(m, s)| (m + s * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_code_fit_uses_floor() {
        let z = LatentCode::new(vec![0.5f32, -1.0, 2.0]);
        let fit = fit_latent_gaussian(&[z.clone()]).unwrap();
        assert_eq!(fit.mean, vec![0.5, -1.0, 2.0]);
        assert_eq!(fit.std, vec![DEFAULT_STD_FLOOR; 3]);
    }

    #[test]
    fn identical_codes_with_zero_floor_sample_the_mean() {
        let z = LatentCode::new(vec![0.25f32, -0.75]);
        let fit = fit_latent_gaussian_with_floor(&[z.clone(), z.clone(), z.clone()], 0.0).unwrap();
        assert_eq!(sample_latent(&fit, 3), z);
        let floored = fit_latent_gaussian(&[z.clone(), z.clone()]).unwrap();
        assert_eq!(floored.std, vec![DEFAULT_STD_FLOOR; 2]);
    }

    #[test]
    fn sampling_is_seeded() {
        let fit = LatentGaussian::standard(8);
        assert_eq!(sample_latent(&fit, 11), sample_latent(&fit, 11));
        assert_ne!(sample_latent(&fit, 11), sample_latent(&fit, 12));
    }

    #[test]
    fn shot_set_validation() {
        let ok = Tensor::<f32>::zeros([3, 16, 16]);
        let bad = Tensor::<f32>::full([3, 16, 16], 1.5);
        assert!(ShotSet::new(vec![ok.clone()], vec!["a".into()], "").is_ok());
        assert!(ShotSet::new(vec![bad], vec!["b".into()], "").is_err());
        assert!(ShotSet::new(vec![], vec![], "").is_err());
        assert!(ShotSet::new(vec![ok.clone(), Tensor::zeros([3, 8, 8])], vec!["a".into(), "c".into()], "").is_err());
    }

    #[test]
    fn mmd_requires_two_shots() {
        let shots = ShotSet::new(vec![Tensor::zeros([3, 16, 16])], vec!["a".into()], "").unwrap();
        let cfg = PretrainConfig {
            loss: LossKind::Mmd,
            iterations: 1,
            descriptor: Descriptor {
                latent_dim: 4,
                base_width: 4,
                resolution: 16,
                channels: 3,
            },
            ..PretrainConfig::default()
        };
        let err = pretrain(&shots, &cfg).unwrap_err();
        assert!(matches!(err.source, Error::Degenerate(_)));
    }
}
