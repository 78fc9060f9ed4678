//! AESim-style search-engine simulation platform.
//!
//! A synthetic ground-truth world serves as the user population; a WGAN-GP
//! generator imitates its (user, query) distribution, a GAIL-trained policy
//! imitates its click/purchase behavior, and the resulting dynamic
//! environment trains and evaluates learning-to-rank models, exposing the
//! gap between offline ranking metrics and simulated conversion.

pub mod commands;
pub mod config;
pub mod error;
pub mod fdcheck;
pub mod feedback;
pub mod logio;
pub mod ltr;
pub mod metrics;
pub mod user_gan;
pub mod nn;
pub mod pipeline;
pub mod world;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
