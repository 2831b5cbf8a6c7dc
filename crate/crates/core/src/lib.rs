//! Infrared/visible image fusion with a parallel spatial + frequency domain
//! network, trained end to end on CPU.
//!
//! The crate is self-contained: tensors, reverse-mode autodiff, 2D FFT of
//! arbitrary size, the fusion network itself, its training loss, an Adam
//! trainer with a portable checkpoint format, and the six standard
//! fusion-quality metrics (EN, SD, SF, MI, VIF, Qabf). A small synthetic
//! dataset generator makes training and evaluation runnable without any
//! external downloads.

pub mod cli;
pub mod fft;
pub mod graph;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod training;

mod error;

pub use error::{Error, Result};
pub use tensor::Tensor;
