//! Multi-echo LiDAR denoising.
//!
//! Scans are ordered grids of echo groups ([`cloud`]). A pair of small
//! convolutional learners is trained without labels by hiding echoes and
//! predicting their range from the neighbors ([`train`]); the correlation
//! learner's score then decides which echo of each group to keep, possibly
//! recovering a later echo hidden behind a snow particle ([`inference`]).
//! Classical radius filters ([`baselines`]), a synthetic snowy-street
//! generator ([`sim`]) and metrics ([`eval`]) complete the toolkit.

pub mod baselines;
pub mod cloud;
pub mod config;
pub mod csr;
pub mod error;
pub mod eval;
pub mod export;
pub mod inference;
pub mod neighbors;
pub mod nn;
pub mod par;
pub mod projection;
pub mod sim;
pub mod train;

pub use cloud::{Label, LabelGrid, MultiEchoOrderedCloud, PointRecord};
pub use error::{Error, Result};
