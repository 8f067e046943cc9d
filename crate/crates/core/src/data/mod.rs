//! Well images, crops, preprocessing and the synthetic plate generator.

pub mod image;
pub mod io;
pub mod relationships;
pub mod synth;

pub use image::{
    augment_flips, random_crop, self_standardize, tile_image, Crop, Provenance, WellImage,
    WellMeta, NEG_CONTROL,
};
pub use relationships::RelationshipDb;
pub use synth::{generate_synthetic_dataset, RenderConfig, SynthConfig};
