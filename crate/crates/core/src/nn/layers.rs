use rand::Rng;

use super::spectral::SpectralNorm;
use super::Param;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// DCGAN weight initialization: N(0, 0.02).
pub const INIT_STD: f64 = 0.02;

/// Whether a forward pass is part of training (batch statistics, power
/// iteration) or inference (running statistics, frozen `u`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mutable handle on a piece of non-trainable layer state.
pub struct Buffer<'a> {
    pub name: String,
    pub values: &'a mut Vec<f64>,
}

/// Shared surface for checkpointing and optimizer wiring.
pub trait Module {
    fn params(&self, prefix: &str, out: &mut Vec<Param>);
    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>);
}

/// A layer owning a weight that spectral normalization may wrap.
pub trait WeightLayer {
    fn weight(&self) -> &Tensor;
    fn spectral_norm(&self) -> Option<&SpectralNorm>;
    fn set_spectral_norm(&mut self, sn: Option<SpectralNorm>);

    /// Attaches fresh power-iteration state (or removes it).
    fn enable_spectral_norm<R: Rng + ?Sized>(&mut self, on: bool, rng: &mut R)
    where
        Self: Sized,
    {
        let sn = on.then(|| SpectralNorm::new(self.weight().shape()[0], rng));
        self.set_spectral_norm(sn);
    }

    /// The weight as used by the forward pass (normalized when SN is on),
    /// without advancing the power iteration.
    fn effective_weight(&self) -> Result<Tensor> {
        match self.spectral_norm() {
            Some(sn) => sn.clone().apply(&self.weight().detach(), 0),
            None => Ok(self.weight().detach()),
        }
    }
}

fn weight_for(weight: &Tensor, sn: &mut Option<SpectralNorm>, mode: Mode) -> Result<Tensor> {
    match sn {
        Some(sn) => sn.apply(weight, if mode == Mode::Train { 1 } else { 0 }),
        None => Ok(weight.clone()),
    }
}

fn push_sn_buffer<'a>(sn: &'a mut Option<SpectralNorm>, prefix: &str, out: &mut Vec<Buffer<'a>>) {
    if let Some(sn) = sn {
        out.push(Buffer {
            name: format!("{prefix}.sn_u"),
            values: sn.u_mut(),
        });
    }
}

fn channel_bias(bias: &Tensor) -> Result<Tensor> {
    bias.reshape(&[1, bias.numel(), 1, 1])
}

#[derive(Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    sn: Option<SpectralNorm>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Tensor::randn(&[out_channels, in_channels, kernel, kernel], INIT_STD, rng);
        weight.set_requires_grad(true);
        let bias = bias.then(|| {
            let b = Tensor::zeros(&[out_channels]);
            b.set_requires_grad(true);
            b
        });
        Conv2d { weight, bias, stride, padding, sn: None }
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = weight_for(&self.weight, &mut self.sn, mode)?;
        let y = x.conv2d(&w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.add(&channel_bias(b)?),
            None => Ok(y),
        }
    }
}

impl WeightLayer for Conv2d {
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
    fn set_spectral_norm(&mut self, sn: Option<SpectralNorm>) {
        self.sn = sn;
    }
}

impl Module for Conv2d {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param::new(format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push(Param::new(format!("{prefix}.bias"), b));
        }
    }
    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        push_sn_buffer(&mut self.sn, prefix, out);
    }
}

/// Transposed convolution with weight `[in, out, k, k]`.
#[derive(Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    sn: Option<SpectralNorm>,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = Tensor::randn(&[in_channels, out_channels, kernel, kernel], INIT_STD, rng);
        weight.set_requires_grad(true);
        let bias = bias.then(|| {
            let b = Tensor::zeros(&[out_channels]);
            b.set_requires_grad(true);
            b
        });
        ConvTranspose2d { weight, bias, stride, padding, sn: None }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = weight_for(&self.weight, &mut self.sn, mode)?;
        let y = x.conv_transpose2d(&w, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.add(&channel_bias(b)?),
            None => Ok(y),
        }
    }
}

impl WeightLayer for ConvTranspose2d {
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
    fn set_spectral_norm(&mut self, sn: Option<SpectralNorm>) {
        self.sn = sn;
    }
}

impl Module for ConvTranspose2d {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param::new(format!("{prefix}.weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push(Param::new(format!("{prefix}.bias"), b));
        }
    }
    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        push_sn_buffer(&mut self.sn, prefix, out);
    }
}

/// Fully connected layer, weight stored `[out, in]` so that spectral
/// normalization sees output features as rows.
#[derive(Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    sn: Option<SpectralNorm>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = Tensor::randn(&[outputs, inputs], INIT_STD, rng);
        weight.set_requires_grad(true);
        let bias = Tensor::zeros(&[outputs]);
        bias.set_requires_grad(true);
        Dense { weight, bias, sn: None }
    }

    /// `[N, in] → [N, out]`
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let w = weight_for(&self.weight, &mut self.sn, mode)?;
        if x.ndim() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("dense", x.shape(), w.shape()));
        }
        x.matmul(&w.transpose()?)?.add(&self.bias)
    }
}

impl WeightLayer for Dense {
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn spectral_norm(&self) -> Option<&SpectralNorm> {
        self.sn.as_ref()
    }
    fn set_spectral_norm(&mut self, sn: Option<SpectralNorm>) {
        self.sn = sn;
    }
}

impl Module for Dense {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param::new(format!("{prefix}.weight"), &self.weight));
        out.push(Param::new(format!("{prefix}.bias"), &self.bias));
    }
    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        push_sn_buffer(&mut self.sn, prefix, out);
    }
}

/// Per-channel batch normalization over `[N, C, H, W]`.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        let gamma = Tensor::ones(&[1, channels, 1, 1]);
        gamma.set_requires_grad(true);
        let beta = Tensor::zeros(&[1, channels, 1, 1]);
        beta.set_requires_grad(true);
        BatchNorm2d {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalized activations before the affine `γ·x̂ + β`.
    pub fn normalize(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::shape("batchnorm", s, &[self.channels()]));
        }
        let c = s[1];
        match mode {
            Mode::Train => {
                if s[0] < 2 {
                    return Err(Error::Contract(
                        "batchnorm in training mode needs a batch of at least 2".into(),
                    ));
                }
                let mean = x.mean_axes(&[0, 2, 3], true)?;
                let centered = x.sub(&mean)?;
                let var = centered.mul(&centered)?.mean_axes(&[0, 2, 3], true)?;
                let count = (s[0] * s[2] * s[3]) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let (mv, vv) = (mean.data(), var.data());
                for ch in 0..c {
                    self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mv[ch];
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * vv[ch] * unbias;
                }
                drop((mv, vv));
                centered.div(&var.add_scalar(self.eps).sqrt())
            }
            Mode::Eval => {
                let mean = Tensor::new(self.running_mean.clone(), &[1, c, 1, 1])?;
                let std: Vec<f64> = self.running_var.iter().map(|v| (v + self.eps).sqrt()).collect();
                x.sub(&mean)?.div(&Tensor::new(std, &[1, c, 1, 1])?)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.normalize(x, mode)?.mul(&self.gamma)?.add(&self.beta)
    }
}

impl Module for BatchNorm2d {
    fn params(&self, prefix: &str, out: &mut Vec<Param>) {
        out.push(Param::new(format!("{prefix}.gamma"), &self.gamma));
        out.push(Param::new(format!("{prefix}.beta"), &self.beta));
    }
    fn buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<Buffer<'a>>) {
        out.push(Buffer {
            name: format!("{prefix}.running_mean"),
            values: &mut self.running_mean,
        });
        out.push(Buffer {
            name: format!("{prefix}.running_var"),
            values: &mut self.running_var,
        });
    }
}
