//! Layers, spectral normalization, batch normalization and the Adam optimizer.

mod adam;
mod layers;
mod spectral;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Buffer, Conv2d, ConvTranspose2d, Dense, Mode, Module, WeightLayer, INIT_STD};
pub use spectral::{spectral_normalize, SpectralNorm, SpectralNormScope};

use rand::Rng;

use crate::tensor::Tensor;

/// A trainable tensor with a stable, checkpoint-visible name.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn new(name: String, tensor: &Tensor) -> Self {
        Param { name, tensor: tensor.clone() }
    }
}

/// A network whose weight layers can be spectrally normalized as a group.
pub trait SpectralNormTarget {
    fn set_spectral_norm(&mut self, on: bool, rng: &mut dyn rand::RngCore);
}

/// Configures spectral normalization on both networks according to `scope`.
pub fn apply_sn_scope<R: Rng>(
    generator: &mut dyn SpectralNormTarget,
    discriminator: &mut dyn SpectralNormTarget,
    scope: SpectralNormScope,
    rng: &mut R,
) {
    generator.set_spectral_norm(scope.generator(), rng);
    discriminator.set_spectral_norm(scope.discriminator(), rng);
}

#[cfg(test)]
mod tests;
