//! Core of the m4sc semantic communication pipeline.
//!
//! Everything in this crate is pure computation over owned buffers: dense
//! linear algebra and optimizers ([`numerics`]), the B-spline KAN projector
//! ([`kan`]), toy semantic encoder/decoder models and the task-instruction
//! dataset ([`semantic`]), linear channel coding over simulated channels
//! ([`channel`]), the multi-user public/private sharing protocol and its wire
//! frame ([`sharing`]), and the phased training process ([`training`]).
//!
//! The crate is `no_std` and only needs `alloc`. File IO, configuration and
//! the command-line harness live in the `m4sc-sim` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod channel;
pub mod error;
pub mod kan;
pub mod numerics;
pub mod semantic;
pub mod sharing;
pub mod training;

pub use error::{Error, Result};
