//! Desk-scale laboratory for multi-reference image generation.
//!
//! The crate implements the full training recipe on synthetic
//! shape-composition tasks:
//!
//! - [`rasters`] — images and an exact, invertible pixel↔latent codec.
//! - [`packing`] — pixel-budget allocation, patchification, and unified
//!   sequence assembly for variable reference counts.
//! - [`backbone`] — a toy joint-attention transformer with 2D rotary
//!   positions, timestep conditioning, low-rank adapters, and exact
//!   gradients via [`autodiff`].
//! - [`flowmatch`] — the velocity-matching objective and the supervised
//!   training loop with a progressive pixel-budget curriculum.
//! - [`sampler`] — deterministic Euler and stochastic Euler–Maruyama
//!   integrators with per-step transition log-densities.
//! - [`msgrpo`] — group rollouts, normalized advantages, the clipped
//!   surrogate with closed-form KL, and the RL training loop.
//! - [`rewards`] — an exact programmatic judge, a remote judge wire
//!   client with a bundled mock server, and reward logging.
//! - [`taskgen`] — deterministic synthesis of editing and composition
//!   samples plus the on-disk dataset format.
//! - [`harness`] — run configuration, evaluation, metrics, and plots.

pub mod autodiff;
pub mod backbone;
pub mod flowmatch;
pub mod harness;
pub mod msgrpo;
pub mod optim;
pub mod packing;
pub mod rasters;
pub mod rewards;
pub mod sampler;
pub mod seeding;
pub mod taskgen;
