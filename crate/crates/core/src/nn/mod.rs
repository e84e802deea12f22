//! Layers, the segmentation and discriminator networks, and the optimizer.

mod adam;
mod discriminator;
mod params;
mod unet;

pub use adam::Adam;
pub use discriminator::{Discriminator, DiscriminatorConfig, REFERENCE_CHANNELS, REFERENCE_STRIDES};
pub use params::{he_uniform, ParamSet};
pub use unet::{PaddingMode, ShapeWalk, UNet, UNetConfig};

