//! Run configuration and its line-oriented `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::adaop::AdaOpConfig;
use crate::data::{DataSource, SynthKind};
use crate::error::{Error, Result};
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::nn::{AdamConfig, SpectralNormScope};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Discriminator steps to run; 0 derives the count from `epochs`.
    pub steps: u64,
    pub batch_size: usize,
    pub k_g: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// When false every generator iteration uses the global objective.
    pub ada_op: bool,
    pub adaop: AdaOpConfig,
    pub sn_scope: SpectralNormScope,
    pub side: usize,
    pub seed: u64,
    pub dataset: String,
    pub dataset_size: usize,
    pub resolution: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub g_width: usize,
    pub d_width: usize,
    pub out_dir: PathBuf,
    /// Steps between sample grids and heatmaps; 0 disables them.
    pub sample_every: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub heatmap_count: usize,
    /// Comma-separated ablation variant labels.
    pub variants: String,
    /// Comma-separated seeds each ablation variant is trained with.
    pub ablation_seeds: String,
    /// Images per set when computing proxy metrics.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ada = AdaOpConfig::default();
        TrainConfig {
            epochs: 1,
            steps: 0,
            batch_size: 16,
            k_g: 1,
            lr_g: 0.003,
            lr_d: 0.0008,
            beta1: 0.5,
            beta2: 0.999,
            ada_op: true,
            adaop: ada,
            sn_scope: SpectralNormScope::LocalNorm,
            side: 4,
            seed: 0,
            dataset: "shapes".into(),
            dataset_size: 2048,
            resolution: 16,
            channels: 1,
            latent_dim: 100,
            g_width: 64,
            d_width: 64,
            out_dir: PathBuf::from("runs/default"),
            sample_every: 0,
            checkpoint_every: 0,
            heatmap_count: 4,
            variants: "baseline, baseline+patch4, baseline+patch8, baseline+patch4+Ada-OP, baseline+patch8+Ada-OP".into(),
            ablation_seeds: "0".into(),
            eval_samples: 1024,
        }
    }
}

/// Every recognised key with the section it is written under.
pub const KEYS: &[(&str, &str)] = &[
    ("epochs", "train"),
    ("steps", "train"),
    ("batch_size", "train"),
    ("k_g", "train"),
    ("lr_g", "train"),
    ("lr_d", "train"),
    ("beta1", "train"),
    ("beta2", "train"),
    ("seed", "train"),
    ("ada_op", "adaop"),
    ("beta", "adaop"),
    ("delta1", "adaop"),
    ("delta2", "adaop"),
    ("alpha1", "adaop"),
    ("alpha2", "adaop"),
    ("alpha3", "adaop"),
    ("sn_scope", "model"),
    ("side", "model"),
    ("latent_dim", "model"),
    ("g_width", "model"),
    ("d_width", "model"),
    ("dataset", "data"),
    ("dataset_size", "data"),
    ("resolution", "data"),
    ("channels", "data"),
    ("out_dir", "output"),
    ("sample_every", "output"),
    ("checkpoint_every", "output"),
    ("heatmap_count", "output"),
    ("eval_samples", "output"),
    ("variants", "ablation"),
    ("ablation_seeds", "ablation"),
];

pub fn valid_keys() -> String {
    KEYS.iter().map(|(k, _)| *k).collect::<Vec<_>>().join(", ")
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value {value:?} for `{key}`: {e}")))
}

impl TrainConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "k_g" => self.k_g = parse(key, v)?,
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "ada_op" => self.ada_op = parse(key, v)?,
            "beta" => self.adaop.beta = parse(key, v)?,
            "delta1" => self.adaop.delta1 = parse(key, v)?,
            "delta2" => self.adaop.delta2 = parse(key, v)?,
            "alpha1" => self.adaop.alpha1 = parse(key, v)?,
            "alpha2" => self.adaop.alpha2 = parse(key, v)?,
            "alpha3" => self.adaop.alpha3 = parse(key, v)?,
            "sn_scope" => self.sn_scope = v.parse()?,
            "side" => self.side = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "g_width" => self.g_width = parse(key, v)?,
            "d_width" => self.d_width = parse(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "sample_every" => self.sample_every = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "heatmap_count" => self.heatmap_count = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "variants" => self.variants = v.to_string(),
            "ablation_seeds" => self.ablation_seeds = v.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`; valid keys: {}", valid_keys()))),
        }
        Ok(())
    }

    /// Text form of one key, in a representation [`TrainConfig::set`] reads back exactly.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "epochs" => self.epochs.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "k_g" => self.k_g.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "seed" => self.seed.to_string(),
            "ada_op" => self.ada_op.to_string(),
            "beta" => self.adaop.beta.to_string(),
            "delta1" => self.adaop.delta1.to_string(),
            "delta2" => self.adaop.delta2.to_string(),
            "alpha1" => self.adaop.alpha1.to_string(),
            "alpha2" => self.adaop.alpha2.to_string(),
            "alpha3" => self.adaop.alpha3.to_string(),
            "sn_scope" => self.sn_scope.to_string(),
            "side" => self.side.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "g_width" => self.g_width.to_string(),
            "d_width" => self.d_width.to_string(),
            "dataset" => self.dataset.clone(),
            "dataset_size" => self.dataset_size.to_string(),
            "resolution" => self.resolution.to_string(),
            "channels" => self.channels.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "sample_every" => self.sample_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "heatmap_count" => self.heatmap_count.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "variants" => self.variants.clone(),
            "ablation_seeds" => self.ablation_seeds.clone(),
            _ => return Err(Error::Config(format!("unknown key `{key}`; valid keys: {}", valid_keys()))),
        })
    }

    /// Parses `key = value` lines grouped under optional `[section]`
    /// headers; `#` starts a comment. Later assignments win.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            let key = key.trim();
            if let Some((_, home)) = KEYS.iter().find(|(k, _)| *k == key) {
                if !section.is_empty() && section != *home {
                    return Err(Error::Config(format!(
                        "line {}: `{key}` belongs in [{home}], found in [{section}]",
                        n + 1
                    )));
                }
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Full text form with every key explicit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, home) in KEYS {
            if *home != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{home}]");
                section = home;
            }
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.k_g == 0 {
            return Err(Error::Config("k_g must be at least 1".into()));
        }
        if self.steps == 0 && self.epochs == 0 {
            return Err(Error::Config("either steps or epochs must be positive".into()));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1), got {}, {}", self.beta1, self.beta2)));
        }
        self.adaop.validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        if self.eval_samples < 2 {
            return Err(Error::Config("eval_samples must be at least 2".into()));
        }
        self.data_source()?;
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            base_width: self.g_width,
            resolution: self.resolution,
            channels: self.channels,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: self.resolution,
            channels: self.channels,
            side: self.side,
            base_width: self.d_width,
        }
    }

    pub fn adam_g(&self) -> AdamConfig {
        AdamConfig::new(self.lr_g, self.beta1, self.beta2)
    }

    pub fn adam_d(&self) -> AdamConfig {
        AdamConfig::new(self.lr_d, self.beta1, self.beta2)
    }

    /// `shapes` and `gradients` select a synthetic population; anything else
    /// is a directory path.
    pub fn data_source(&self) -> Result<DataSource> {
        match self.dataset.parse::<SynthKind>() {
            Ok(kind) => {
                if self.dataset_size == 0 {
                    return Err(Error::Config("dataset_size must be positive".into()));
                }
                Ok(DataSource::Synthetic {
                    kind,
                    size: self.dataset_size,
                })
            }
            Err(_) if !self.dataset.is_empty() => Ok(DataSource::Directory(PathBuf::from(&self.dataset))),
            Err(e) => Err(e),
        }
    }

    pub fn seed_list(&self) -> Result<Vec<u64>> {
        let seeds: Vec<u64> = self
            .ablation_seeds
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse("ablation_seeds", s))
            .collect::<Result<_>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("ablation_seeds lists no seeds".into()));
        }
        Ok(seeds)
    }

    /// Discriminator steps implied by `steps` or `epochs`.
    pub fn total_steps(&self, batches_per_epoch: usize) -> u64 {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * batches_per_epoch as u64
        }
    }
}
