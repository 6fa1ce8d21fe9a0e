//! Scene flow estimation for whole point-cloud sequences.
//!
//! A coordinate MLP maps `(x, y, z, t, direction)` to a per-interval
//! displacement. It is fitted to a sequence with multi-step Euler-integrated
//! truncated Chamfer and cycle-consistency objectives, then queried for
//! per-frame flow and long-horizon point tracks.


pub mod adam;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod neighbors;
pub mod nn;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
