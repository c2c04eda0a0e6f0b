//! Fisher-information-guided sparse fine-tuning inside parameter-efficient
//! adapter modules.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: dense tensors and a define-by-run reverse-mode graph.
//! * [`model`]: a tiny transformer encoder classifier and synthetic tasks.
//! * [`peft`]: LoRA, DoRA, serial adapters, prefix tuning, IA³ and UniPELT,
//!   all exposing their trainable scalars as one flat vector.
//! * [`fisher`]: empirical Fisher scores, top-k / random / reverse masks and
//!   gradient masking.
//! * [`train`]: mask-aware SGD/AdamW and the training loop.
//! * [`harness`]: configuration, persistence and experiment drivers.

pub mod autodiff;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod model;
pub mod peft;
pub mod train;
pub mod util;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
