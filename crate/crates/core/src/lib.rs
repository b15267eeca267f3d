//! White-matter age regression from diffusion scalar maps.
//!
//! The crate covers the whole pipeline at desk scale: single-file NIfTI-1
//! I/O, masking and resampling of template-space volumes, ROI feature
//! extraction, a small reverse-mode autodiff engine with the operators a 3D
//! ResNet needs, the model zoo (ROI MLPs and ResNet10/18/34 with a
//! sex-aware head), participant-level cross-validation with paired t-tests
//! and brain-age-gap densities, and a synthetic aging phantom.

pub mod experiment;
pub mod fsio;
pub mod kv;
pub mod models;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod roi;
pub mod stats;
pub mod volume;

pub use models::{AgeModel, ModelSpec};
pub use nifti::{LabelVolume, NiftiError, Volume3D};
pub use phantom::PhantomSpec;
pub use roi::{FeatureVector, RoiTable};
pub use volume::MultiChannelVolume;
