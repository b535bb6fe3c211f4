//! Laboratory for in-context regression with transformers whose training
//! tasks are drawn from hyperspherical caps.
//!
//! The crate covers the whole pipeline: exact cap and band samplers
//! ([`sphere`]), task families and pools ([`tasks`]), episode construction
//! ([`episode`]), a small reverse-mode tensor engine ([`autodiff`]), a
//! GPT-2-style decoder with an AdamW trainer ([`model`]), analytic and
//! Monte-Carlo baselines ([`baselines`]), test-loss metrics and phase
//! classification ([`metrics`]), and the config-driven experiment harness
//! with CSV/JSON/SVG outputs ([`harness`], [`plot`]).

pub mod autodiff;
pub mod baselines;
pub mod episode;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod rng;
pub mod sphere;
pub mod stats;
pub mod tasks;

pub use error::{Error, Result};
pub use rng::{RngState, RngStream};
