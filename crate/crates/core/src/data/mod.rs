//! Synthetic skeleton data: rendering, manifests, splitting, region crops,
//! augmentation and PGM I/O.

pub mod augment;
pub mod dataset;
pub mod pgm;
pub mod synth;

pub use augment::{augment, CropParams, Prepared, CROP_MARGIN};
pub use dataset::{crop_region, split, split_manifest, Gender, Manifest, ManifestRow, Region, Sample};
pub use pgm::GrayImage;
pub use synth::{generate, generate_samples, GenParams};
