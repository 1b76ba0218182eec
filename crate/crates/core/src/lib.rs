//! Particle-filtered latent diffusion for linear inverse problems.
//!
//! A guided reverse diffusion (measurement gradient plus optional gluing term)
//! is run over a population of latent particles that are reweighted by
//! measurement fit, resampled when degenerate and pruned on a schedule.
//! Score models are analytic (Gaussian and Gaussian-mixture priors), which
//! makes exact posteriors available for checking.

pub mod error;
pub mod filter;
pub mod harness;
pub mod metrics;
pub mod operators;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;

pub use error::{PfldError, Result};
pub use filter::{pfld_run, FilterConfig, FilterOutcome, ResampleScheme};
pub use operators::{Codec, ImageShape, LinearMap, LinearOperator, Measurement};
pub use sampler::{GradientMode, PsldConfig, StepContext, StepSize};
pub use schedule::{DiffusionSchedule, SigmaConvention};
pub use score::{GaussianPrior, GmmPrior, ScoreModel};
