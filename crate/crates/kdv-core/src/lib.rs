//! Spectral analysis and boundary control of the linearized KdV equation
//! `y_t + y_xxx + y_x = 0` on `(0, L)` near critical lengths.

pub mod biortho;
pub mod control;
pub mod critical_lengths;
pub mod error;
pub mod expsum;
pub mod modulated;
pub mod numerics;
pub mod spectrum_a;
pub mod simulator;
pub mod spectrum_b;

pub use error::{KdvError, Result};
