//! Physics-informed neural network solver for nearly incompressible linear
//! elasticity.
//!
//! The crate trains fully-connected networks to satisfy the elasticity system
//! `-div(sigma(u)) = f` with Dirichlet data, where
//! `sigma(u) = lambda (div u) I + 2 mu eps(u)`. Two formulations are provided:
//!
//! * the standard collocation loss, which degrades badly as `lambda / mu`
//!   grows (volumetric locking shows up as optimization collapsing toward the
//!   zero field), and
//! * a decomposition-based loss that splits `u = u_hat + u_tilde` across two
//!   balanced subsystems with learned force splits, which stays robust for
//!   large `lambda`.
//!
//! Spatial derivatives come from second-order forward jets ([`jet`]), and
//! parameter gradients from reverse-mode adjoints: a general tape ([`tape`])
//! for arbitrary expressions, and a batched layer-level engine ([`batch`])
//! that the training loop uses.

// Index-based loops mirror the tensor index notation of the math they
// implement.
#![allow(clippy::needless_range_loop)]

pub mod batch;
pub mod config;
pub mod diagnostics;
pub mod elasticity;
pub mod jet;
pub mod losses;
pub mod network;
pub mod par;
pub mod report;
pub mod tape;
pub mod trainer;

pub use jet::{seed_spatial, Jet2, JetError};
pub use network::{Activation, AnchoredNetwork, MlpNetwork, MlpSpec};
pub use tape::AdjointTape;
