//! Critic-free, likelihood-free online fine-tuning of flow-matching policies.
//!
//! The crate is a desk-scale laboratory built around one idea: a flow policy
//! sampled with an Euler–Maruyama solver has Gaussian one-step transitions
//! whose mean is affine in the network output. Two mirrored velocity
//! candidates around the rollout policy can then be ranked by how well they
//! explain each observed solver transition, using only the episode outcome as
//! a label.
//!
//! Layout:
//!
//! * [`policy`] – a small MLP velocity field with exact reverse-mode gradients.
//! * [`solver`] – ODE / SDE samplers and the affine one-step transition.
//! * [`objective`] – mirrored branches, step errors and the losses.
//! * [`env`] – seeded toy tasks, expert demos and the flow-matching SFT stage.
//! * [`rollout`] – data collection with the EMA rollout policy.
//! * [`trainer`] – mini-batch optimization, EMA sync, evaluation.
//! * [`ablation`] – arm sets for the component-wise comparisons.
//! * [`verify`] – executable checks of the identities the method relies on.

pub mod ablation;
pub mod config;
pub mod env;
pub mod error;
pub mod manifest;
pub mod objective;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod sft;
pub mod solver;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
