//! Cue-prompted volumetric report generation on synthetic phantoms.
//!
//! The crate is organised bottom-up: [`nn`] is a small reverse-mode autograd
//! engine, [`synthdata`] builds the phantom corpus, [`backbone`] encodes
//! volumes, [`discriminator`] trains linear probes whose predictions become
//! cue prompts ([`cueprompt`]), [`generator`] turns image tokens and cues into
//! reports, and [`evalproto`] / [`reliance`] score the result. [`harness`]
//! wires everything into reproducible runs.

pub mod backbone;
pub mod cueprompt;
pub mod discriminator;
pub mod error;
pub mod evalproto;
pub mod generator;
pub mod harness;
pub mod nn;
pub mod questions;
pub mod reliance;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
