//! Spectral normalization by power iteration.
//!
//! The weight is viewed as a matrix of `shape[0]` rows by everything else.
//! The left singular vector estimate `u` persists across calls so that a
//! single iteration per training step tracks the top singular value as the
//! weight drifts.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIGMA_FLOOR: f64 = 1e-12;

/// Which networks get spectrally normalized weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpectralNormScope {
    NoNorm,
    /// Discriminator only.
    #[default]
    LocalNorm,
    /// Every weight of both networks.
    GlobalNorm,
}

impl SpectralNormScope {
    pub fn discriminator(self) -> bool {
        !matches!(self, SpectralNormScope::NoNorm)
    }

    pub fn generator(self) -> bool {
        matches!(self, SpectralNormScope::GlobalNorm)
    }
}

impl fmt::Display for SpectralNormScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectralNormScope::NoNorm => "no-norm",
            SpectralNormScope::LocalNorm => "local-norm",
            SpectralNormScope::GlobalNorm => "global-norm",
        })
    }
}

impl FromStr for SpectralNormScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-norm" | "none" => Ok(SpectralNormScope::NoNorm),
            "local-norm" | "local" => Ok(SpectralNormScope::LocalNorm),
            "global-norm" | "global" => Ok(SpectralNormScope::GlobalNorm),
            other => Err(Error::Config(format!(
                "unknown spectral-norm scope `{other}` (expected no-norm, local-norm or global-norm)"
            ))),
        }
    }
}

/// Power-iteration state attached to one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNorm {
    u: Vec<f64>,
}

impl SpectralNorm {
    /// Random unit `u` for a weight whose leading dimension is `rows`.
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        if normalize_in_place(&mut u) < SIGMA_FLOOR {
            u = vec![0.0; rows];
            u[0] = 1.0;
        }
        SpectralNorm { u }
    }

    pub fn from_u(u: Vec<f64>) -> Result<Self> {
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "spectral-norm vector must have unit norm, got {norm}"
            )));
        }
        Ok(SpectralNorm { u })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub(crate) fn u_mut(&mut self) -> &mut Vec<f64> {
        &mut self.u
    }

    /// `weight / σ̂` after `iterations` power-iteration steps (zero keeps `u`
    /// frozen, as in inference).
    pub fn apply(&mut self, weight: &Tensor, iterations: usize) -> Result<Tensor> {
        let rows = weight.shape().first().copied().unwrap_or(1);
        if rows != self.u.len() {
            return Err(Error::shape("spectral_normalize", weight.shape(), &[self.u.len()]));
        }
        let cols = weight.numel() / rows.max(1);
        let w = weight.data();

        let mut v = vec![0.0; cols];
        for _ in 0..iterations {
            mat_t_vec(&w, rows, cols, &self.u, &mut v);
            normalize_in_place(&mut v);
            let mut u = vec![0.0; rows];
            mat_vec(&w, rows, cols, &v, &mut u);
            if normalize_in_place(&mut u) > SIGMA_FLOOR {
                self.u = u;
            }
        }
        mat_t_vec(&w, rows, cols, &self.u, &mut v);
        if normalize_in_place(&mut v) < SIGMA_FLOOR {
            drop(w);
            return Ok(weight.clone());
        }
        let outer: Vec<f64> = self.u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
        drop(w);

        // σ̂ = uᵀ W v, differentiable in W with u, v held constant.
        let sigma = weight.mul(&Tensor::new(outer, weight.shape())?)?.sum();
        if sigma.item().abs() < SIGMA_FLOOR {
            return Ok(weight.clone());
        }
        weight.div(&sigma)
    }

    /// Current estimate `uᵀ W v` without touching the state.
    pub fn sigma(&self, weight: &Tensor) -> f64 {
        let rows = self.u.len();
        let cols = weight.numel() / rows.max(1);
        let w = weight.data();
        let mut v = vec![0.0; cols];
        mat_t_vec(&w, rows, cols, &self.u, &mut v);
        // uᵀ W (Wᵀu/|Wᵀu|) = |Wᵀu|
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// One-shot spectral normalization with caller-held `u`.
pub fn spectral_normalize(weight: &Tensor, u: &mut Vec<f64>, iterations: usize) -> Result<Tensor> {
    if iterations == 0 {
        return Err(Error::Contract("spectral_normalize needs at least one iteration".into()));
    }
    let mut sn = SpectralNorm { u: std::mem::take(u) };
    let out = sn.apply(weight, iterations);
    *u = sn.u;
    out
}

fn normalize_in_place(x: &mut [f64]) -> f64 {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > SIGMA_FLOOR {
        x.iter_mut().for_each(|v| *v /= norm);
    }
    norm
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..rows {
        let xr = x[r];
        for (o, a) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += a * xr;
        }
    }
}
