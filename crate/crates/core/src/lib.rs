//! Offline analytics for denoising trajectories of masked diffusion
//! language models: when predictions commit, when linear probes can read
//! coarse and lexical structure from hidden states, how certainty and
//! calibration evolve, and how much final accuracy depends on positions
//! filled at each step.

pub mod commitment;
pub mod error;
pub mod labels;
pub mod output;
pub mod perturb;
pub mod pipeline;
pub mod probekit;
pub mod seed;
pub mod stats;
pub mod synthworld;
pub mod trajstore;
pub mod uncertainty;

pub use error::{Error, Result};
