//! Standard masked autoencoder and the weakly supervised classifier.

pub mod loss;
mod model;
mod wsl;

pub use loss::{cross_entropy, loss_mae, masked_mse, softmax, Reconstruction};
pub use model::{normalize_patches, MaeModel};
pub use wsl::WslModel;

use crate::data::Crop;
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

/// Reject crops the model's positional tables or tokenizer cannot take.
pub(crate) fn check_crop(config: &ViTConfig, crop: &Crop, channels: Option<usize>) -> Result<()> {
    if crop.size() != config.crop_size {
        return Err(Error::Dimension(format!(
            "crop size {} but the model was built for {}",
            crop.size(),
            config.crop_size
        )));
    }
    if let Some(expected) = channels {
        if crop.channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: crop.channels(),
            });
        }
    }
    Ok(())
}
