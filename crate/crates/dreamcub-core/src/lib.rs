//! Desk-scale dialogue world model over a finite POMDP of latent user beliefs.
//!
//! The user's hidden state is a triple (emotion, sentiment, intention) with a
//! canonical flat index, observed only through templated utterances. The crate
//! provides:
//!
//! - [`types`]: the POMDP vocabulary (beliefs, observations, actions, trajectories).
//! - [`env`]: a fully tabular synthetic dialogue environment with exact oracles
//!   (forward-filtered posterior, exact sequence log-likelihood).
//! - [`world_model`]: the learned dialogue world model (belief inference,
//!   belief transition, next-query emission, reward head) trained by closed-form
//!   ELBO ascent, plus the ELBO-gap diagnostics.
//! - [`reward_model`]: a Bradley-Terry preference reward model over state-action
//!   features.
//! - [`policy`]: softmax actor and Q critic optimized by clipped PPO with a
//!   KL-regularized reward against a frozen reference policy.
//! - [`dwm_rl`]: the outer training loop (dynamics learning, imagination-based
//!   behavior learning, environment interaction) with a FIFO replay buffer.
//! - [`metrics`]: the evaluation battery (accuracy/F1, Bradley-Terry preference
//!   bias, Pearson correlation, BLEU-2, ROUGE-L, distinct-n).
//! - [`config`], [`dataset`], [`report`]: run configuration, JSONL dialogue
//!   ingestion, and report/checkpoint serialization used by the CLI.
//!
//! Everything is deterministic given a root seed: all randomness flows through
//! [`rng::rng_for`], and every serialized artifact embeds the config hash and
//! seed that produced it.

pub mod config;
pub mod dataset;
pub mod dwm_rl;
pub mod env;
pub mod error;
pub mod features;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod report;
pub mod reward_model;
pub mod rng;
pub mod types;
pub mod world_model;

pub use error::{Error, Result};
