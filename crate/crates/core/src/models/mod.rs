//! Generator and patch discriminator networks.

mod discriminator;
mod generator;
pub mod geometry;

pub use discriminator::{Discriminator, DiscriminatorConfig, FeatureMap, LEAKY_SLOPE};
pub use generator::{Generator, GeneratorConfig};
pub use geometry::{ConvGeometry, PixelRect};
