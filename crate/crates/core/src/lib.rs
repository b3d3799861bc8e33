//! Multi-modal segmentation from semi-paired images with two-step
//! curriculum disentanglement learning.
//!
//! Images are factorized into a modality-specific style vector and a
//! modality-invariant content pyramid. A first training step learns style
//! consistency from augmented views of single images; a second step learns
//! translation between modalities from unpaired and (few) paired subjects.
//! At test time a single image of any modality is segmented from its
//! content code alone.

pub mod augment;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hash;
pub mod losses;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
