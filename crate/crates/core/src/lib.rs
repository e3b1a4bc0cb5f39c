//! Decision transformer conditioned on multimodal game instructions.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense tensors, a small reverse-mode tape, attention blocks,
//!   finite-difference checking, AdamW and the binary checkpoint format.
//! * [`mgi`]: the instruction data model, a synthetic instruction generator and
//!   the frozen embedding providers.
//! * [`conditioning`]: temporal encoders, fusion MLP and importance scores.
//! * [`hyperadapter`]: hypernetworks producing adapter matrices and their fusion.
//! * [`policy`]: the decision transformer with parallel FFN adapters.
//! * [`arcade`]: the procedural grid-game suite, offline datasets and task splits.
//! * [`bench`]: training, evaluation, score normalisation and the fixture oracle.

pub mod arcade;
pub mod bench;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod hyperadapter;
pub mod mgi;
pub mod numerics;
pub mod policy;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Scalar, Tape, Tensor, Var};
