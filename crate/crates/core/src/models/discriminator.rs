use rand::Rng;

use super::geometry::{self, ConvGeometry, PixelRect};
use crate::error::{Error, Result};
use crate::nn::{Buffer, Conv2d, Mode, Module, Param, SpectralNormTarget, WeightLayer};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub channels: usize,
    /// Side of the square output feature map; 1 is a scalar-output
    /// discriminator.
    pub side: usize,
    /// Channels of the first downsampling layer; later layers double it.
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 16,
            channels: 1,
            side: 4,
            base_width: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 4 || !r.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution must be a power of two ≥ 4, got {r}")));
        }
        if self.side == 0 || !self.side.is_power_of_two() || self.side > r {
            return Err(Error::Config(format!(
                "feature-map side must be a power of two dividing the resolution {r}, got {}",
                self.side
            )));
        }
        if self.channels == 0 || self.base_width == 0 {
            return Err(Error::Config("discriminator channels and width must be positive".into()));
        }
        Ok(())
    }

    /// Spatial size where downsampling stops.
    fn trunk_side(&self) -> usize {
        if self.side == 1 {
            4
        } else {
            self.side
        }
    }
}

/// Patch scores for a batch: `values[k, i, j]` rates the receptive field of
/// cell `(i, j)` in image `k`; higher means more real.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    geometry: Vec<ConvGeometry>,
    input_size: usize,
}

impl FeatureMap {
    /// Wraps raw scores `[K, h, w]` with the geometry that produced them.
    pub fn new(values: Tensor, geometry: Vec<ConvGeometry>, input_size: usize) -> Result<Self> {
        if values.ndim() != 3 || values.numel() == 0 {
            return Err(Error::invalid("feature_map", format!("expected [K, h, w], got {:?}", values.shape())));
        }
        Ok(FeatureMap { values, geometry, input_size })
    }

    /// Scores with no receptive-field geometry attached (each cell maps onto
    /// its own block of a `h`-cell grid).
    pub fn from_scores(values: Tensor) -> Result<Self> {
        Self::new(values, Vec::new(), 0)
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    /// Scores of image `k`, row-major.
    pub fn image_scores(&self, k: usize) -> Vec<f64> {
        let n = self.cells();
        self.values.data()[k * n..(k + 1) * n].to_vec()
    }

    pub fn receptive_field(&self, i: usize, j: usize) -> Result<PixelRect> {
        if self.geometry.is_empty() && self.input_size == 0 {
            return Err(Error::Contract("feature map carries no receptive-field geometry".into()));
        }
        geometry::receptive_field(&self.geometry, self.input_size, i, j)
    }
}

/// Stack of Convolution-LeakyReLU units ending in a single-channel conv whose
/// spatial output is the feature map.
#[derive(Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    trunk: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut trunk = Vec::new();
        let mut size = config.resolution;
        let mut cin = config.channels;
        let mut cout = config.base_width;
        while size > config.trunk_side() {
            trunk.push(Conv2d::new(cin, cout, 4, 2, 1, true, rng));
            size /= 2;
            cin = cout;
            cout *= 2;
        }
        let head = if config.side == 1 {
            Conv2d::new(cin, 1, size, 1, 0, true, rng)
        } else {
            Conv2d::new(cin, 1, 3, 1, 1, true, rng)
        };
        Ok(Discriminator { config, trunk, head })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn geometry(&self) -> Vec<ConvGeometry> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|c| ConvGeometry::new(c.kernel_size(), c.stride, c.padding))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let expect = [x.shape().first().copied().unwrap_or(0), c.channels, c.resolution, c.resolution];
        if x.ndim() != 4 || x.shape()[1..] != expect[1..] {
            return Err(Error::shape("discriminator", x.shape(), &expect));
        }
        Ok(())
    }

    fn trunk_forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for conv in &mut self.trunk {
            h = conv.forward(&h, mode)?.leaky_relu(LEAKY_SLOPE)?;
        }
        Ok(h)
    }

    /// Raw (unsquashed) patch scores for `[K, C, H, W]` images.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<FeatureMap> {
        let h = self.trunk_forward(x, mode)?;
        let y = self.head.forward(&h, mode)?;
        let s = y.shape().to_vec();
        let values = y.reshape(&[s[0], s[2], s[3]])?;
        FeatureMap::new(values, self.geometry(), self.config.resolution)
    }

    /// Penultimate activations averaged over space: `[K, C']`.
    pub fn features(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk_forward(x, Mode::Eval)?;
        h.mean_axes(&[2, 3], false)
    }

    pub fn receptive_field_of(&self, i: usize, j: usize) -> Result<PixelRect> {
        geometry::receptive_field(&self.geometry(), self.config.resolution, i, j)
    }

    pub fn parameters(&self) -> Vec<Param> {
        let mut out = Vec::new();
        self.params("disc", &mut out);
        out
    }

    pub fn set_trainable(&self, on: bool) {
        self.parameters().iter().for_each(|p| p.tensor.set_requires_grad(on));
    }

    pub fn weight_layers(&self) -> Vec<&dyn WeightLayer> {
        self.trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .map(|c| c as &dyn WeightLayer)
            .collect()
    }
}

impl Module for Discriminator {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        for (i, conv) in self.trunk.iter().enumerate() {
            conv.params(&format!("{prefix}.{i}"), out);
        }
        self.head.params(&format!("{prefix}.head"), out);
    }

    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        for (i, conv) in self.trunk.iter_mut().enumerate() {
            conv.buffers(&format!("{prefix}.{i}"), out);
        }
        self.head.buffers(&format!("{prefix}.head"), out);
    }
}

impl SpectralNormTarget for Discriminator {
    fn set_spectral_norm(&mut self, on: bool, rng: &mut dyn rand::RngCore) {
        for conv in &mut self.trunk {
            conv.enable_spectral_norm(on, rng);
        }
        self.head.enable_spectral_norm(on, rng);
    }
}
