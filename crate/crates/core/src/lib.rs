//! Efficient convolutional-recurrent networks for single-channel speech
//! enhancement.
//!
//! The crate covers the whole chain: a small reverse-mode autodiff engine
//! ([`autodiff`]), convolutional LSTM and GRU cells ([`recurrent`]), the
//! FCRN15 / EffCRN23 / EffCRN23lite topologies with parameter and FLOP
//! accounting ([`topology`]), STFT analysis-synthesis and bounded complex
//! masking ([`dsp`]), and the training pipeline ([`train`]).

pub mod autodiff;
pub mod dsp;
pub mod error;
pub mod recurrent;
pub mod selftest;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ActShape, Real, Tensor};
