//! RadMamba: a micro-Doppler classifier built on a bidirectional selective
//! state-space block, together with everything needed to train and inspect it
//! on a laptop CPU.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: a dense tensor type and a tape-based
//!   reverse-mode differentiation engine, generic over `f32`/`f64`.
//! * [`signal`]: synthetic micro-Doppler generation, STFT, dataset IO and
//!   sliding windows for continuous recordings.
//! * [`preprocess`]: channel fusion + downsampling, patch segmentation,
//!   patch embedding and sinusoidal position encoding.
//! * [`ssm`]: selective parameter generation, discretization and the
//!   sequential / associative scans.
//! * [`model`]: the CP-Mamba block, the full classifier and checkpoints.
//! * [`train`]: loss, AdamW, plateau scheduler, training and evaluation.
//! * [`analysis`]: parameter/FLOP accounting, patch correlation and the
//!   ablation grid.
//!
//! Data-parallel inner loops go through [`par`], which dispatches to rayon
//! when the `parallel` feature is enabled and runs sequentially otherwise.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod model;
pub mod par;
pub mod preprocess;
pub mod signal;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use par::ExecPolicy;
pub use tensor::{Precision, Scalar, Tensor};
