//! One-step diffusion video super-resolution on toy networks and synthetic video.

pub mod error;
pub mod evalcli;
pub mod nets;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod rts;
pub mod schedule;
pub mod sjd;
pub mod tai;
pub mod videodata;

pub use error::{Error, Result};
