//! Hinge discriminator objective, mask selection, masked and global generator
//! losses, and the adaptive rule choosing between them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::FeatureMap;
use crate::patchmetrics::DispersionReport;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::shape(op, a.values.shape(), b.values.shape()));
    }
    Ok(())
}

/// `mean(max(0, 1 − real)) + mean(max(0, 1 + fake))`, minimized by the
/// discriminator.
pub fn discriminator_loss(real: &FeatureMap, fake: &FeatureMap) -> Result<Tensor> {
    same_shape("discriminator_loss", real, fake)?;
    let r = real.values.neg().add_scalar(1.0).relu().mean();
    let f = fake.values.add_scalar(1.0).relu().mean();
    r.add(&f)
}

/// Binary selection of low-quality cells.
#[derive(Debug, Clone)]
pub struct MaskMatrix {
    /// `[K, h, w]` of zeros and ones; never tracks gradients.
    pub values: Tensor,
    pub alpha_used: f64,
    pub selected_count: usize,
}

impl MaskMatrix {
    pub fn full(shape: &[usize]) -> Self {
        let values = Tensor::ones(shape);
        MaskMatrix {
            selected_count: values.numel(),
            values,
            alpha_used: f64::INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.selected_count == 0
    }
}

/// Marks every cell scoring strictly below `alpha`, which maximizes
/// `Σ h⊙(α − D)` over binary `h`.
pub fn select_mask(fake: &FeatureMap, alpha: f64) -> Result<MaskMatrix> {
    if !alpha.is_finite() {
        return Err(Error::Contract(format!("mask threshold must be finite, got {alpha}")));
    }
    let bits: Vec<f64> = fake.values.data().iter().map(|&s| if s < alpha { 1.0 } else { 0.0 }).collect();
    let selected_count = bits.iter().filter(|&&b| b == 1.0).count();
    Ok(MaskMatrix {
        values: Tensor::new(bits, fake.values.shape())?,
        alpha_used: alpha,
        selected_count,
    })
}

/// Result of the masked generator objective. With an empty mask the loss is
/// zero and carries no gradient; the caller is expected to fall back.
#[derive(Debug, Clone)]
pub struct LocalLoss {
    pub loss: Tensor,
    pub empty_mask: bool,
}

/// Mean of `−score` over the selected cells.
pub fn local_generator_loss(fake: &FeatureMap, mask: &MaskMatrix) -> Result<LocalLoss> {
    if mask.values.shape() != fake.values.shape() {
        return Err(Error::shape("local_generator_loss", fake.values.shape(), mask.values.shape()));
    }
    Ok(LocalLoss {
        loss: fake.values.neg().masked_mean(&mask.values)?,
        empty_mask: mask.is_empty(),
    })
}

/// Mean of `−score` over every cell of every image.
pub fn global_generator_loss(fake: &FeatureMap) -> Result<Tensor> {
    // Shares the masked path so a full mask reproduces it bit for bit.
    fake.values.neg().masked_mean(&Tensor::ones(fake.values.shape()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaOpConfig {
    pub beta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl Default for AdaOpConfig {
    fn default() -> Self {
        AdaOpConfig {
            beta: 0.05,
            delta1: 0.02,
            delta2: 0.08,
            alpha1: -0.5,
            alpha2: 0.0,
            alpha3: 0.5,
        }
    }
}

impl AdaOpConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.delta1, self.delta2, self.alpha1, self.alpha2, self.alpha3];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("Ada-OP constants must be finite: {self:?}")));
        }
        if self.delta1 > self.delta2 {
            return Err(Error::Config(format!("delta1 ({}) must not exceed delta2 ({})", self.delta1, self.delta2)));
        }
        if !(self.alpha1 <= self.alpha2 && self.alpha2 <= self.alpha3) {
            return Err(Error::Config(format!(
                "thresholds must satisfy alpha1 ≤ alpha2 ≤ alpha3, got {}, {}, {}",
                self.alpha1, self.alpha2, self.alpha3
            )));
        }
        Ok(())
    }

    pub fn alpha(&self, level: LocalLevel) -> f64 {
        match level {
            LocalLevel::I => self.alpha1,
            LocalLevel::II => self.alpha2,
            LocalLevel::III => self.alpha3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizationMode {
    Global,
    Local,
}

impl fmt::Display for OptimizationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizationMode::Global => "global",
            OptimizationMode::Local => "local",
        })
    }
}

impl FromStr for OptimizationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(OptimizationMode::Global),
            "local" => Ok(OptimizationMode::Local),
            _ => Err(Error::Config(format!("unknown optimization mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LocalLevel {
    I,
    II,
    III,
}

impl fmt::Display for LocalLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalLevel::I => "I",
            LocalLevel::II => "II",
            LocalLevel::III => "III",
        })
    }
}

impl FromStr for LocalLevel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" => Ok(LocalLevel::I),
            "II" => Ok(LocalLevel::II),
            "III" => Ok(LocalLevel::III),
            _ => Err(Error::Config(format!("unknown local level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Global,
    Local { level: LocalLevel, alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizationDecision {
    pub branch: Branch,
    pub sigma: f64,
    pub sigma_bar: f64,
}

impl OptimizationDecision {
    pub fn mode(&self) -> OptimizationMode {
        match self.branch {
            Branch::Global => OptimizationMode::Global,
            Branch::Local { .. } => OptimizationMode::Local,
        }
    }

    pub fn level(&self) -> Option<LocalLevel> {
        match self.branch {
            Branch::Global => None,
            Branch::Local { level, .. } => Some(level),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self.branch {
            Branch::Global => None,
            Branch::Local { alpha, .. } => Some(alpha),
        }
    }
}

/// Picks the generator objective from the batch dispersions; the first
/// matching rule wins.
pub fn decide(report: &DispersionReport, config: &AdaOpConfig) -> Result<OptimizationDecision> {
    decide_from(report.sigma_global, report.sigma_local_bar, config)
}

pub fn decide_from(sigma: f64, sigma_bar: f64, config: &AdaOpConfig) -> Result<OptimizationDecision> {
    config.validate()?;
    if sigma.is_nan() || sigma_bar.is_nan() {
        return Err(Error::Contract(format!("dispersion statistics are NaN (σ={sigma}, σ̄={sigma_bar})")));
    }
    let branch = if sigma >= config.beta {
        Branch::Global
    } else {
        let level = if sigma_bar <= config.delta1 {
            LocalLevel::I
        } else if sigma_bar <= config.delta2 {
            LocalLevel::II
        } else {
            LocalLevel::III
        };
        Branch::Local {
            level,
            alpha: config.alpha(level),
        }
    };
    Ok(OptimizationDecision { branch, sigma, sigma_bar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, k: usize, side: usize) -> FeatureMap {
        FeatureMap::from_scores(Tensor::new(values, &[k, side, side]).unwrap()).unwrap()
    }

    #[test]
    fn hinge_examples() {
        let d = discriminator_loss(&map(vec![2.0; 4], 1, 2), &map(vec![-2.0; 4], 1, 2)).unwrap();
        assert_eq!(d.item(), 0.0);
        let d = discriminator_loss(&map(vec![0.0; 4], 1, 2), &map(vec![0.0; 4], 1, 2)).unwrap();
        assert_eq!(d.item(), 2.0);
        assert!(discriminator_loss(&map(vec![0.0; 4], 1, 2), &map(vec![0.0; 1], 1, 1)).is_err());
    }

    #[test]
    fn mask_examples() {
        let y = map(vec![0.5, -0.2, 0.1, -0.9], 1, 2);
        let m = select_mask(&y, 0.0).unwrap();
        assert_eq!(m.values.to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(m.selected_count, 2);
        assert!(select_mask(&y, -1.0).unwrap().is_empty());
        assert_eq!(select_mask(&y, 1.0).unwrap().selected_count, 4);
        // ties are excluded
        assert_eq!(select_mask(&y, 0.5).unwrap().values.to_vec(), vec![0.0, 1.0, 1.0, 1.0]);
        assert!(select_mask(&y, f64::NAN).is_err());
    }

    #[test]
    fn local_loss_examples() {
        let y = map(vec![1.0, 2.0, 3.0, 4.0], 1, 2);
        let mask = MaskMatrix {
            values: Tensor::new(vec![0.0, 1.0, 0.0, 1.0], &[1, 2, 2]).unwrap(),
            alpha_used: 0.0,
            selected_count: 2,
        };
        let l = local_generator_loss(&y, &mask).unwrap();
        assert_eq!(l.loss.item(), -3.0);
        assert!(!l.empty_mask);
        assert_eq!(global_generator_loss(&map(vec![0.0; 4], 1, 2)).unwrap().item(), 0.0);
        assert_eq!(global_generator_loss(&map(vec![5.0; 8], 2, 2)).unwrap().item(), -5.0);
    }

    #[test]
    fn masked_positions_get_no_gradient() {
        let scores = Tensor::param(vec![0.3, -0.4, 0.9, -1.2, 0.0, 2.0, -0.1, 0.6], &[2, 2, 2]).unwrap();
        let y = FeatureMap::from_scores(scores.clone()).unwrap();
        let m = select_mask(&y, 0.0).unwrap();
        local_generator_loss(&y, &m).unwrap().loss.backward().unwrap();
        let g = scores.grad().unwrap();
        for (gv, mv) in g.iter().zip(m.values.to_vec()) {
            if mv == 0.0 {
                assert_eq!(*gv, 0.0);
            } else {
                assert_eq!(*gv, -1.0 / m.selected_count as f64);
            }
        }

        scores.zero_grad();
        let empty = select_mask(&y, -10.0).unwrap();
        let l = local_generator_loss(&y, &empty).unwrap();
        assert!(l.empty_mask);
        l.loss.backward().unwrap();
        assert!(scores.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decide_examples() {
        let cfg = AdaOpConfig {
            beta: 0.3,
            delta1: 0.05,
            delta2: 0.2,
            ..Default::default()
        };
        let d = decide_from(0.5, 99.0, &cfg).unwrap();
        assert_eq!((d.mode(), d.level(), d.alpha()), (OptimizationMode::Global, None, None));
        let d = decide_from(0.1, 0.01, &cfg).unwrap();
        assert_eq!(d.branch, Branch::Local { level: LocalLevel::I, alpha: cfg.alpha1 });
        let d = decide_from(0.1, 0.2, &cfg).unwrap();
        assert_eq!(d.level(), Some(LocalLevel::II));
        let d = decide_from(0.1, 0.05, &cfg).unwrap();
        assert_eq!(d.level(), Some(LocalLevel::I));
        let d = decide_from(0.1, 0.21, &cfg).unwrap();
        assert_eq!(d.branch, Branch::Local { level: LocalLevel::III, alpha: cfg.alpha3 });
        assert_eq!(decide_from(0.3, 0.0, &cfg).unwrap().mode(), OptimizationMode::Global);
        assert!(decide_from(f64::NAN, 0.0, &cfg).is_err());
        assert!(decide_from(0.0, f64::NAN, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AdaOpConfig::default().validate().is_ok());
        let bad = AdaOpConfig { delta1: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AdaOpConfig { alpha2: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(decide_from(0.0, 0.0, &bad).is_err());
    }

    #[test]
    fn labels_round_trip() {
        for l in [LocalLevel::I, LocalLevel::II, LocalLevel::III] {
            assert_eq!(l.to_string().parse::<LocalLevel>().unwrap(), l);
        }
        for m in [OptimizationMode::Global, OptimizationMode::Local] {
            assert_eq!(m.to_string().parse::<OptimizationMode>().unwrap(), m);
        }
    }

    fn score_map() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (1usize..=3).prop_flat_map(|side| (prop::collection::vec(-2.0f64..2.0, side * side), Just(side)))
    }

    proptest! {
        #[test]
        fn threshold_mask_is_optimal((v, side) in score_map(), alpha in -2.0f64..2.0) {
            let y = map(v.clone(), 1, side);
            let m = select_mask(&y, alpha).unwrap().values.to_vec();
            let objective = |h: &[f64]| h.iter().zip(&v).map(|(h, d)| h * (alpha - d)).sum::<f64>();
            let got = objective(&m);
            let n = v.len();
            let mut best = f64::NEG_INFINITY;
            for bits in 0u32..(1 << n) {
                let h: Vec<f64> = (0..n).map(|i| ((bits >> i) & 1) as f64).collect();
                best = best.max(objective(&h));
            }
            prop_assert!(got >= best - 1e-12, "{got} < {best}");
        }

        #[test]
        fn mask_grows_with_alpha((v, side) in score_map(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let y = map(v, 1, side);
            let ml = select_mask(&y, lo).unwrap();
            let mh = select_mask(&y, hi).unwrap();
            prop_assert!(ml.selected_count <= mh.selected_count);
            for (x, y) in ml.values.to_vec().iter().zip(mh.values.to_vec()) {
                prop_assert!(*x <= y);
            }
        }

        #[test]
        fn full_mask_equals_global(v in prop::collection::vec(-5.0f64..5.0, 18)) {
            let y = map(v, 2, 3);
            let local = local_generator_loss(&y, &MaskMatrix::full(&[2, 3, 3])).unwrap().loss.item();
            let global = global_generator_loss(&y).unwrap().item();
            prop_assert_eq!(local.to_bits(), global.to_bits());
        }

        #[test]
        fn exactly_one_branch(sigma in -1.0f64..1.0, bar in -1.0f64..1.0) {
            let cfg = AdaOpConfig::default();
            let d = decide_from(sigma, bar, &cfg).unwrap();
            prop_assert_eq!(d.mode() == OptimizationMode::Local, d.level().is_some() && d.alpha().is_some());
            let expect_global = sigma >= cfg.beta;
            prop_assert_eq!(d.mode() == OptimizationMode::Global, expect_global);
        }
    }

    #[test]
    fn generator_gradient_matches_hand_masked_backward() {
        use crate::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
        use crate::nn::Mode;

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let gcfg = GeneratorConfig { latent_dim: 6, base_width: 4, resolution: 16, channels: 1 };
        let dcfg = DiscriminatorConfig { resolution: 16, channels: 1, side: 4, base_width: 4 };
        let mut g = Generator::new(gcfg, &mut rng).unwrap();
        let mut d = Discriminator::new(dcfg, &mut rng).unwrap();
        d.set_trainable(false);
        let z = Tensor::randn(&[3, 6], 1.0, &mut rng);

        let fake = g.forward(&z, Mode::Eval).unwrap();
        let y = d.forward(&fake, Mode::Eval).unwrap();
        let mask = select_mask(&y, 0.0).unwrap();
        assert!(mask.selected_count > 0 && mask.selected_count < 48);
        local_generator_loss(&y, &mask).unwrap().loss.backward().unwrap();
        let via_loss: Vec<Vec<f64>> = g.parameters().iter().map(|p| p.tensor.grad().unwrap()).collect();
        g.parameters().iter().for_each(|p| p.tensor.zero_grad());

        let fake = g.forward(&z, Mode::Eval).unwrap();
        let y = d.forward(&fake, Mode::Eval).unwrap();
        let n = mask.selected_count as f64;
        let seed: Vec<f64> = mask.values.to_vec().iter().map(|&m| if m == 1.0 { -1.0 / n } else { 0.0 }).collect();
        y.values.backward_with(seed).unwrap();
        for (p, want) in g.parameters().iter().zip(&via_loss) {
            let got = p.tensor.grad().unwrap();
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}: {a} vs {b}", p.name);
            }
        }
        assert!(d.parameters().iter().all(|p| p.tensor.grad().is_none()));
    }
}
