//! Gaussian-process latent autoregression.
//!
//! A latent trajectory `z_{1:L}` on a time grid carries the prior
//! `N(0, K ⊗ I_d)`, where `K` is a kernel Gram matrix. That joint law factors
//! causally into Gaussian conditionals `p(z_t | z_{<t})`, which gives a
//! sequential sampler equivalent to block Cholesky sampling, a chain-rule
//! log-density, and the KL terms of a β-ELBO.
//!
//! All numerics are generic over [`Scalar`] (`f32` / `f64`); the `*64`
//! aliases below fix the precision the tolerances in this crate assume.

pub mod checks;
pub mod error;
pub mod iterative;
pub mod kernels;
pub mod latent_prior;
pub mod linalg;
pub mod rng;
pub mod samplers;
pub mod scalar;
pub mod toy_model;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use kernels::{build_gram, GramMatrix, KernelFamily, KernelSpec, TimeGrid};
pub use latent_prior::{ConditionalLaw, LatentTrajectory};
pub use samplers::NoiseBlock;
pub use variational::{BetaSchedule, DiagonalPosterior, KlCap};

pub type KernelSpec64 = KernelSpec<f64>;
pub type TimeGrid64 = TimeGrid<f64>;
pub type GramMatrix64 = GramMatrix<f64>;
pub type LatentTrajectory64 = LatentTrajectory<f64>;
pub type ConditionalLaw64 = ConditionalLaw<f64>;
pub type NoiseBlock64 = NoiseBlock<f64>;
pub type DiagonalPosterior64 = DiagonalPosterior<f64>;
pub type BetaSchedule64 = BetaSchedule<f64>;
pub type KlCap64 = KlCap<f64>;
pub type ToyParams64 = toy_model::ToyParams<f64>;
pub type TrainConfig64 = toy_model::TrainConfig<f64>;

pub type KernelSpec32 = KernelSpec<f32>;
pub type GramMatrix32 = GramMatrix<f32>;
