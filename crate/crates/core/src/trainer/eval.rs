//! Proxy quality metrics: Fréchet distance between Gaussian fits of
//! discriminator features, and a raw-pixel moment gap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::models::{Discriminator, DiscriminatorConfig, Generator};
use crate::nn::{Mode, INIT_STD};
use crate::patchmetrics::DispersionReport;
use crate::tensor::Tensor;

/// Rows of `[n, d]` as a matrix.
fn rows(samples: &Tensor) -> Result<DMatrix<f64>> {
    let s = samples.shape();
    if s.len() < 2 || s[0] < 2 {
        return Err(Error::Contract(format!("need at least two samples of rank ≥ 1, got {s:?}")));
    }
    let d = samples.numel() / s[0];
    Ok(DMatrix::from_row_slice(s[0], d, &samples.data()))
}

/// Sample mean and unbiased covariance of the rows.
pub fn gaussian_fit(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> f64 {
    let s1 = psd_sqrt(cov1);
    let inner = &s1 * cov2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + cov1.trace() + cov2.trace() - 2.0 * cross;
    d.max(0.0)
}

/// Fréchet distance between two `[n, d]` feature sets.
pub fn feature_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (xa, xb) = (rows(a)?, rows(b)?);
    if xa.ncols() != xb.ncols() {
        return Err(Error::Contract(format!(
            "feature widths differ: {} vs {}",
            xa.ncols(),
            xb.ncols()
        )));
    }
    let (m1, c1) = gaussian_fit(&xa);
    let (m2, c2) = gaussian_fit(&xb);
    Ok(frechet_distance(&m1, &c1, &m2, &c2))
}

/// Proxy-FID of two image sets under `extractor`'s pooled penultimate
/// features. Only comparable between calls sharing the extractor.
pub fn proxy_fid(extractor: &mut Discriminator, real: &Tensor, fake: &Tensor) -> Result<f64> {
    let fr = extractor.features(real)?;
    let ff = extractor.features(fake)?;
    feature_distance(&fr, &ff)
}

/// A frozen, randomly initialized discriminator with He-scaled weights, used
/// as a feature extractor shared by runs whose own discriminators differ.
pub fn reference_extractor(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = Discriminator::new(config, &mut rng)?;
    for layer in d.weight_layers() {
        let w = layer.weight();
        let fan_in = (w.numel() / w.shape()[0]) as f64;
        let scale = (2.0 / fan_in).sqrt() / INIT_STD;
        w.update_data(|v| v.iter_mut().for_each(|x| *x *= scale))?;
    }
    d.set_trainable(false);
    Ok(d)
}

/// `‖μ_r − μ_g‖² + ‖Σ_r − Σ_g‖_F²` over flattened pixels.
pub fn pixel_moment_distance(real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (xr, xf) = (rows(real)?, rows(fake)?);
    if xr.ncols() != xf.ncols() {
        return Err(Error::Contract("image sets differ in size".into()));
    }
    let (m1, c1) = gaussian_fit(&xr);
    let (m2, c2) = gaussian_fit(&xf);
    Ok((m1 - m2).norm_squared() + (c1 - c2).norm_squared())
}

/// Draws `n` samples from `generator` in inference mode, in chunks.
pub fn generate(generator: &mut Generator, z: &Tensor) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let n = z.shape()[0];
    let latent = z.shape()[1];
    let zs = z.data().clone();
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let chunk = Tensor::new(zs[start * latent..end * latent].to_vec(), &[end - start, latent])?;
        let x = generator.forward(&chunk, Mode::Eval)?;
        shape = x.shape().to_vec();
        out.extend_from_slice(&x.data());
    }
    shape[0] = n;
    Tensor::new(out, &shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fréchet distance under the run's own discriminator; a within-run
    /// trend signal, not a comparable FID.
    pub proxy_fid: f64,
    pub pixel_moment: f64,
    pub mean_score: f64,
    pub sigma: f64,
    pub sigma_bar: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "samples = {}\nproxy_fid (run discriminator features) = {}\npixel_moment = {}\nmean_score = {}\nsigma = {}\nsigma_bar = {}\n",
            self.samples, self.proxy_fid, self.pixel_moment, self.mean_score, self.sigma, self.sigma_bar
        )
    }
}

/// Scores `fake` against `real` with `disc` as both feature extractor and
/// patch scorer.
pub fn evaluate_sets(disc: &mut Discriminator, real: &Tensor, fake: &Tensor) -> Result<EvalReport> {
    let proxy_fid = proxy_fid(disc, real, fake)?;
    let pixel_moment = pixel_moment_distance(real, fake)?;
    let scores = disc.forward(fake, Mode::Eval)?;
    let report = DispersionReport::from_map(&scores);
    Ok(EvalReport {
        proxy_fid,
        pixel_moment,
        mean_score: report.mu,
        sigma: report.sigma_global,
        sigma_bar: report.sigma_local_bar,
        samples: fake.shape()[0],
    })
}
