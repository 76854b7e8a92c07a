use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, ConvTranspose2d, Mode, Module, Param, SpectralNormTarget, WeightLayer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    /// Channels of the last hidden stage; earlier stages double it.
    pub base_width: usize,
    pub resolution: usize,
    pub channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 100,
            base_width: 64,
            resolution: 16,
            channels: 1,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "generator resolution must be a power of two ≥ 16, got {}",
                self.resolution
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {}", self.channels)));
        }
        if self.base_width == 0 {
            return Err(Error::Config("generator width must be positive".into()));
        }
        Ok(())
    }
}

/// One ConvTranspose-BatchNorm-ReLU unit (the final unit swaps BN-ReLU for
/// tanh).
#[derive(Debug)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: Option<BatchNorm2d>,
}

/// DCGAN generator: `z ∈ R^latent` → 4×4 → … → `resolution`², doubling the
/// spatial size at every stride-2 stage.
#[derive(Debug)]
pub struct Generator {
    config: GeneratorConfig,
    blocks: Vec<UpBlock>,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stages = (config.resolution / 4).trailing_zeros() as usize;
        // width at spatial size s is base·(resolution/2)/s
        let width_at = |s: usize| config.base_width * (config.resolution / 2) / s;

        let mut blocks = Vec::with_capacity(stages + 1);
        let first = width_at(4);
        blocks.push(UpBlock {
            conv: ConvTranspose2d::new(config.latent_dim, first, 4, 1, 0, false, rng),
            norm: Some(BatchNorm2d::new(first)),
        });
        let mut size = 4;
        for stage in 0..stages {
            let last = stage + 1 == stages;
            let cin = width_at(size);
            size *= 2;
            let cout = if last { config.channels } else { width_at(size) };
            blocks.push(UpBlock {
                conv: ConvTranspose2d::new(cin, cout, 4, 2, 1, last, rng),
                norm: (!last).then(|| BatchNorm2d::new(cout)),
            });
        }
        Ok(Generator { config, blocks })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `[K, latent] → [K, C, H, W]` with values in `[−1, 1]`.
    pub fn forward(&mut self, z: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.config.latent_dim {
            return Err(Error::shape("generator", s, &[s.first().copied().unwrap_or(0), self.config.latent_dim]));
        }
        let mut x = z.reshape(&[s[0], s[1], 1, 1])?;
        for block in &mut self.blocks {
            x = block.conv.forward(&x, mode)?;
            x = match &mut block.norm {
                Some(bn) => bn.forward(&x, mode)?.relu(),
                None => x.tanh(),
            };
        }
        Ok(x)
    }

    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.params("gen", &mut out);
        out
    }

    pub fn set_trainable(&self, on: bool) {
        self.parameters().iter().for_each(|p| p.tensor.set_requires_grad(on));
    }

    pub fn weight_layers(&self) -> Vec<&dyn WeightLayer> {
        self.blocks.iter().map(|b| &b.conv as &dyn WeightLayer).collect()
    }
}

impl Module for Generator {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.params(&format!("{prefix}.{i}.conv"), out);
            if let Some(bn) = &b.norm {
                bn.params(&format!("{prefix}.{i}.bn"), out);
            }
        }
    }

    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.buffers(&format!("{prefix}.{i}.conv"), out);
            if let Some(bn) = &mut b.norm {
                bn.buffers(&format!("{prefix}.{i}.bn"), out);
            }
        }
    }
}

impl SpectralNormTarget for Generator {
    fn set_spectral_norm(&mut self, on: bool, rng: &mut dyn rand::RngCore) {
        for b in &mut self.blocks {
            b.conv.enable_spectral_norm(on, rng);
        }
    }
}
