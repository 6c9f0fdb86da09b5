//! Set-prediction object detection at desk scale.
//!
//! The crate covers the whole pipeline of a detection transformer that needs
//! no non-maximum suppression: box geometry, exact bipartite matching,
//! anchor/point/denoising object queries, the matching losses, a small
//! reverse-mode autodiff core, the model itself, document-image
//! preprocessing, COCO-style evaluation and a synthetic page generator.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod exec;
pub mod geometry;
pub mod gradcore;
pub mod losses;
pub mod matching;
pub mod model;
pub mod preprocess;
pub mod querygen;
pub mod synth;

pub use error::{Error, Result};
