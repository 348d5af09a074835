//! Deceptive visual encryption over wireless wiretap channels.
//!
//! A confidential digit is carried by the class of a transmitted image. The
//! transmitter sends a decoy image whose class encodes a falsified digit,
//! superposed at low power with an XOR mask that turns the decoy into a
//! poisoned image classified as the true digit. A legitimate receiver with a
//! good channel recovers both layers by successive interference cancellation;
//! an eavesdropper with a worse channel typically recovers only the decoy.
//!
//! Modules, bottom-up:
//! - [`semantics`]: message/tag mapping, image database, bit serialization.
//! - [`classifier`]: small convolutional classifier with explicit gradients.
//! - [`poisoner`]: gradient matching attack, poison masks, offline cache.
//! - [`phy`]: BPSK, superposition, Rayleigh/AWGN channels, SIC, link budget.
//! - [`actors`]: transmitter, legitimate receiver, eavesdropper models.
//! - [`harness`]: scenes, Monte-Carlo runs, sweeps, calibration, export.

pub mod actors;
pub mod classifier;
pub mod error;
pub mod exec;
pub mod harness;
pub mod phy;
pub mod poisoner;
pub mod seed;
pub mod semantics;

pub use error::{Error, Result};
