//! Event-stream super-resolution with a recurrent multi-branch fusion
//! network: event representations, augmentation, a small reverse-mode
//! autodiff engine, the network itself, and training/evaluation tooling.

pub mod augment;
pub mod cli;
pub mod config;
pub mod error;
pub mod event;
pub mod io;
pub mod model;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod train;
pub mod verify;
pub mod tensor;

pub use error::{Error, Result};
