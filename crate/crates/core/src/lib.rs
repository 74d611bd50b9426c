//! Score-conditioned diffusion over an invertible piano performance codec.
//!
//! [`codecs`] turns aligned performances into per-note parameter matrices
//! and back. [`denoiser`] and [`sampler`] train and run the conditional
//! diffusion model on fixed-width segments of those matrices. [`metrics`]
//! compares renderings with human performances, and [`proxy`] predicts
//! perceptual features from piano rolls. [`synthetic`] generates scores,
//! performances and corpora for tests and experiments.
//!
//! The guide in `book/` walks through each module; its examples are
//! compiled and run as doc-tests of this crate.

// `!(x > 0.0)` guards also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod codecs;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod midi;
pub mod nn;
pub mod notes;
pub mod proxy;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod synthetic;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/codecs.md")]
    struct Codecs;
    #[doc = include_str!("../../../book/src/schedule.md")]
    struct Schedule;
    #[doc = include_str!("../../../book/src/denoiser.md")]
    struct Denoiser;
    #[doc = include_str!("../../../book/src/sampling.md")]
    struct Sampling;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/proxy.md")]
    struct Proxy;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
