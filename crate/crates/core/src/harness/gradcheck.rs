//! Finite-difference checks of the four training and inversion objectives.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, init_params, Descriptor};
use crate::engine::gradcheck::{check_gradient, GradCheckOptions, GradCheckReport};
use crate::engine::Tensor;
use crate::error::Result;
use crate::invert::measurement_objective_generic;
use crate::losses::{l2_loss_on_tape, mmd_loss_on_tape, KernelConfig, MmdEstimator};
use crate::operators::{gaussian_operator_for_ratio, luma_operator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    L2,
    Mmd,
    Cs,
    Colorization,
}

impl Objective {
    pub const ALL: [Objective; 4] = [Objective::L2, Objective::Mmd, Objective::Cs, Objective::Colorization];

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::L2 => "l2",
            Objective::Mmd => "mmd",
            Objective::Cs => "cs",
            Objective::Colorization => "colorization",
        }
    }
}

/// Shots used by the training objectives.
const CHECK_SHOTS: usize = 3;

fn random_images(n: usize, d: &Descriptor, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let [c, h, w] = d.image_shape();
    let data = (0..n * d.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new([n, c, h, w], data).expect("consistent shape")
}

/// Gradient of `objective` with respect to every decoder leaf and the
/// latent code(s), checked at a random point derived from `seed`.
pub fn check_objective(
    objective: Objective,
    descriptor: Descriptor,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init_params::<f64>(rng.random(), descriptor)?.params;
    // Move the affine parameters off their initialization.
    for leaf in params.leaves_mut() {
        if leaf.name.starts_with("bn") {
            for v in leaf.tensor.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let n_dec = params.len();
    let batch = match objective {
        Objective::L2 | Objective::Mmd => CHECK_SHOTS,
        Objective::Cs | Objective::Colorization => 1,
    };
    let z = (0..batch * descriptor.latent_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    params.push("z", Tensor::new([batch, descriptor.latent_dim], z)?, true)?;
    let opts = GradCheckOptions {
        seed: rng.random(),
        ..opts.clone()
    };
    let d = descriptor;
    match objective {
        Objective::L2 => {
            let shots = random_images(batch, &d, &mut rng);
            check_gradient(&params, &opts, |tape, v| {
                let x = decoder::forward(tape, &d, &v[..n_dec], v[n_dec])?;
                l2_loss_on_tape(tape, x, &shots)
            })
        }
        Objective::Mmd => {
            let shots = random_images(batch, &d, &mut rng);
            let per: Vec<Tensor<f64>> = (0..batch).map(|i| shots.index_axis0(i)).collect::<Result<_>>()?;
            let kernel = KernelConfig::median_heuristic(&per)?;
            check_gradient(&params, &opts, |tape, v| {
                let x = decoder::forward(tape, &d, &v[..n_dec], v[n_dec])?;
                mmd_loss_on_tape(tape, x, &shots, kernel, MmdEstimator::Literal)
            })
        }
        Objective::Cs | Objective::Colorization => {
            let op = Arc::new(match objective {
                Objective::Cs => gaussian_operator_for_ratio(0.1, d.image_len(), rng.random())?,
                _ => luma_operator(d.resolution, d.resolution),
            });
            let truth = random_images(1, &d, &mut rng).index_axis0(0)?;
            let y = op.apply(&truth, crate::ExecMode::Sequential)?;
            check_gradient(&params, &opts, |tape, v| {
                let x = decoder::forward(tape, &d, &v[..n_dec], v[n_dec])?;
                measurement_objective_generic(tape, x, &op, &y)
            })
        }
    }
}

/// Options used by the suite: kink-avoiding central differences in
/// extended precision.
pub fn suite_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        kink_shrinks: 4,
        coords_per_leaf: 6,
        directions: 3,
        abs_floor: 1e-8,
        seed: 0,
    }
}
