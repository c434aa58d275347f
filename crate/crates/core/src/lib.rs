//! End-to-end translation of disfluent "speech" into fluent text.
//!
//! The crate covers the whole experimental pipeline: corpus preparation
//! ([`data`]), filterbank features ([`audio`]), an LSTM/NiN encoder with an
//! attentional character decoder ([`nn`], [`model`]), training ([`train`]),
//! beam search ([`decode`]), evaluation ([`metrics`]) and the post-editing
//! baselines ([`postprocess`]).

pub mod error;
pub mod nn;

pub use error::{Error, ErrorClass, Result};
pub mod audio;
pub mod data;
pub mod model;
pub mod decode;
pub mod metrics;
pub mod postprocess;
pub mod train;
