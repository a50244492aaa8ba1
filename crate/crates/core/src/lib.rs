//! Discrete-time discrete flow matching, autoregressive generation as a
//! probability flow, and the decomposition of its generating velocity into
//! router-weighted expert flows.
//!
//! The crate is organized bottom-up:
//!
//! - [`dfm`]: probability paths, velocities, divergence and the discrete
//!   continuity equation, exact push-forward.
//! - [`ar`]: the mask coupling, reveal scheduler and 1-sparse velocity that
//!   make left-to-right generation a flow.
//! - [`decentral`]: expert flows, exact cluster posteriors, the feature-space
//!   softmax router and top-k filtering.
//! - [`clustering`]: spherical balanced k-means for sharding data.
//! - [`experts`]: count-based autoregressive experts and evaluation.
//! - [`harness`]: synthetic corpora, the equivalence suite, end-to-end
//!   experiments and reports.
//! - [`io`]: feature matrices, id sidecars and assignment files.

pub mod ar;
pub mod clustering;
pub mod decentral;
pub mod dfm;
pub mod error;
pub mod experts;
pub mod harness;
pub mod io;

pub use error::{Error, Result};
