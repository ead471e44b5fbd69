//! Offline risk-averse reinforcement learning with a distributional critic and
//! a diffusion behavior model.
//!
//! The critic is an implicit quantile network trained with the quantile Huber
//! loss. The behavior policy is a DDPM-style noise predictor, optionally
//! steered by a quality classifier, and the actor adds a bounded learned
//! perturbation `lambda * xi(s, beta)` to behavior samples `beta`, chosen to
//! maximize a distorted value (CVaR, Wang or CPW) of the critic's return
//! distribution.
//!
//! Everything runs on a small reverse-mode [`Tape`] over dense `f64`
//! [`Tensor`]s. [`trainer::Trainer`] drives the full update loop and
//! [`eval`] rolls policies out in the risky point-mass environment from
//! [`env`](mod@env).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod checkpoint;
pub mod critic;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod eval;
pub mod kv;
pub mod nn;
pub mod optim;
pub mod tabular;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Result, UdacError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
