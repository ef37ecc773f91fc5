//! Numerical core of the GTR-Mamba next-POI recommender.
//!
//! Everything in this crate is `no_std` (with `alloc`): Lorentz-model
//! geometry, a small reverse-mode tape, the relation-graph pretraining, the
//! spatio-temporal channel, the tangent-routed selective SSM, the dual-pathway
//! prediction head, and the training loop. File formats, ingestion and the
//! command-line tool live in the `gtr-mamba` crate.
//!
//! Points on the hyperboloid are handled in two ways:
//!
//! * [`manifold`] works on full `(n+1)`-coordinate [`LorentzPoint`]s and is the
//!   reference kernel for standalone geometry.
//! * The [`tape`] stores a point by its spatial coordinates only; the time
//!   coordinate is always `sqrt(1 + |s|^2)`, so every recorded point lies on
//!   the manifold by construction.
#![no_std]
// Index loops mirror the per-channel recurrences; `!(x > 0.0)` style checks
// are deliberate so that NaN is rejected too.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod embeddings;
pub mod error;
pub mod kmeans;
pub mod manifold;
pub mod model;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod rng;
pub mod ssm;
pub mod stats;
pub mod stchannel;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

mod fm;

pub use error::{Error, Result};
pub use manifold::{LorentzPoint, RotationParams, TangentVector};
pub use params::{ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
