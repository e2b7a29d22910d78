//! Low-shot decoder priors for linear inverse problems.
//!
//! A small transposed-convolution decoder is pre-trained on a handful of
//! example images (ℓ2 or kernel-MMD loss) and then used to recover an image
//! from underdetermined linear measurements in two stages: a search over the
//! latent code with frozen weights, then a joint refinement of code and
//! weights. An untrained-network baseline and an experiment harness are
//! included.

pub mod checkpoint;
pub mod decoder;
pub mod engine;
pub mod error;
pub mod exec;
pub mod harness;
pub mod invert;
pub mod losses;
pub mod operators;
pub mod optim;
pub mod pretrain;
pub mod seeding;

pub use error::{Error, Result};
pub use exec::ExecMode;
