//! Fully distributed carrier-frequency-offset (CFO) estimation over wireless
//! networks using Gaussian belief propagation.
//!
//! Each node of a connected network estimates the frequency offsets of its own
//! oscillators using only relative-offset measurements with its direct
//! neighbours and a handful of message exchanges. The crate contains
//!
//! - [`gaussian`]: information-form Gaussian messages,
//! - [`topology`]: network graphs (random geometric placement, edge-list I/O),
//! - [`measurement`]: the per-link training model, joint ML CFO/channel
//!   estimator, Cramér-Rao bounds and the linear relative-CFO model,
//! - [`bp`]: the synchronous belief-propagation engine,
//! - [`oracle`]: centralized solutions used as ground truth,
//! - [`baseline`]: a reconstructed average-consensus baseline and MSE metrics,
//! - [`harness`]: Monte-Carlo scenarios, CSV output and the CLI.
//!
//! Node ids are 0-based inside the library. Every file format (edge lists,
//! CSV output) uses 1-based ids.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod bp;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod measurement;
pub mod oracle;
pub mod seed;
pub mod topology;

pub use error::{Error, Result};
pub use gaussian::GaussianMessage;
pub use topology::NetworkGraph;
