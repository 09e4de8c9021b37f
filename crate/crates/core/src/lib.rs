//! Parameter-efficient fine-tuning of a frozen univariate convolutional
//! backbone for few-shot remaining-useful-life regression.
//!
//! Every variable of a multivariate window is pushed through the backbone as
//! an independent stream. A small low-rank side path per block adapts the
//! features, and a learned pseudo-variable (the *meta-variable*) gathers
//! information from all streams through a gated, pooled low-rank channel.
//! The regressor only ever sees the meta-variable.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod params;
pub mod peft;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
