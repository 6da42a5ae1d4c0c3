//! Self-supervised pre-training workbench for small vision transformers on
//! synthetic radiograph-like images: deterministic data generation,
//! student-teacher distillation with masked-patch prediction, and
//! frozen-encoder evaluation, all on CPU with reproducible results.

pub mod augment;
pub mod error;
pub mod encoder;
pub mod evalsuite;
pub mod formats;
pub mod image;
pub mod inspect;
pub mod numerics;
pub mod rng;
pub mod ssl;
pub mod synthcxr;
pub mod trainer;

pub use error::{Error, Result};
