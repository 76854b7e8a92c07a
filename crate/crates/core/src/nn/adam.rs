use super::Param;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed, ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    pub(crate) names: Vec<String>,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], config: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                config.beta1, config.beta2
            )));
        }
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Adam {
            config,
            t: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// Applies one update to every parameter. Nothing is modified unless every
    /// parameter carries a gradient of the right size.
    pub fn step(&mut self, params: &[Param]) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "Adam was built for {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (p, name) in params.iter().zip(&self.names) {
            if &p.name != name {
                return Err(Error::Contract(format!("Adam expected parameter `{name}`, got `{}`", p.name)));
            }
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| Error::Contract(format!("parameter `{}` has no gradient", p.name)))?;
            if g.len() != p.tensor.numel() {
                return Err(Error::shape("adam", p.tensor.shape(), &[g.len()]));
            }
            grads.push(g);
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.tensor.update_data(|w| {
                for j in 0..w.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}
