//! Attribute-encoding capsule network for explainable nodule diagnosis.
//!
//! Six attribute capsules (one per radiologist-scored visual attribute) are
//! the only path from the image to the malignancy prediction. Training uses a
//! three-part loss: masked reconstruction, per-attribute score regression and
//! a KL term against a Gaussian fitted to the raters' malignancy scores.

pub mod baseline;
pub mod capsule;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod ratings;
pub mod trainer;

pub use error::{Error, RatingError, Result};
