//! Energy-based anomaly detection trained by manifold projection-diffusion
//! recovery.
//!
//! Data are encoded by a frozen autoencoder, diffused in its (spherical)
//! latent space and decoded back onto the decoder manifold. An energy function
//! is then trained to recover the original point, with negatives drawn by a
//! short Langevin chain in the latent space followed by one in the input space.
//!
//! Module map:
//!
//! | module | contents |
//! |---|---|
//! | [`diffcore`] | tensors, reverse-mode tape, Adam |
//! | [`nets`] | MLPs, autoencoders, scalar and reconstruction energies |
//! | [`manifold`] | autoencoder pretraining, the perturbation, ensembles |
//! | [`recovery`] | recovery energy and its latent pullback |
//! | [`sampler`] | Langevin chains and two-stage negative sampling |
//! | [`trainer`] | the training loop |
//! | [`metrics`] | AUROC, pAUROC, AUPR, grid density error |
//! | [`data`] | generators, CSV ingestion, preprocessing |
//! | [`checkpoint`] | binary parameter checkpoints |

// Negated comparisons such as `!(x > 0.0)` are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod diffcore;
mod error;
pub mod manifold;
pub mod metrics;
pub mod nets;
pub mod recovery;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Deterministic random stream used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds a [`Rng`].
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
