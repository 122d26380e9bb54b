//! Recurrent Gaussian location policy for single-object tracking.
//!
//! An observation encoder feeds an LSTM whose last four hidden units are the
//! mean of an isotropic Gaussian over normalized boxes `(cx, cy, w, h)`. The
//! network is trained with episodic REINFORCE plus a per-step baseline and
//! evaluated with one-pass success/precision curves.

pub mod checkpoint;
pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod network;
pub mod policy;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::BBox;
