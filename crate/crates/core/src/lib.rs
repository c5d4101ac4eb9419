//! Adversarial patch attacks on object detectors via localized
//! target-region augmentation: imaging primitives, dataset handling,
//! augmentation, environmental adaptation, losses, patch optimization and
//! an evaluation harness, plus a built-in trainable toy detector so the
//! whole pipeline runs end to end at desk scale.

pub mod adapt;
pub mod augment;
pub mod autodiff;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod optimizer;
pub mod rng;
pub mod workers;

pub use error::{Error, Result};
