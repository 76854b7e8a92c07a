//! Controlled comparison of discriminator output size and adaptive
//! optimization: every variant trains on the same seeds and therefore the
//! same data batches, and is scored by one shared feature extractor.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::DiscriminatorConfig;
use crate::trainer::{eval, TrainConfig, Trainer};

/// Seed of the frozen extractor all variants are scored with.
pub const REFERENCE_SEED: u64 = 0x5eed_f1d;
pub const REFERENCE_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Patch4,
    Patch8,
    Patch4AdaOp,
    Patch8AdaOp,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Patch4,
        Variant::Patch8,
        Variant::Patch4AdaOp,
        Variant::Patch8AdaOp,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Patch4 => "baseline+patch4",
            Variant::Patch8 => "baseline+patch8",
            Variant::Patch4AdaOp => "baseline+patch4+Ada-OP",
            Variant::Patch8AdaOp => "baseline+patch8+Ada-OP",
        }
    }

    /// Feature-map side; the baseline scores whole images.
    pub fn side(self) -> usize {
        match self {
            Variant::Baseline => 1,
            Variant::Patch4 | Variant::Patch4AdaOp => 4,
            Variant::Patch8 | Variant::Patch8AdaOp => 8,
        }
    }

    pub fn ada_op(self) -> bool {
        matches!(self, Variant::Patch4AdaOp | Variant::Patch8AdaOp)
    }

    /// `base` with this variant's discriminator side and objective rule.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            side: self.side(),
            ada_op: self.ada_op(),
            ..base.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;
    /// Case-insensitive; `path4`/`path8` are read as `patch4`/`patch8`.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace("path", "patch");
        Variant::ALL
            .into_iter()
            .find(|v| v.label().to_ascii_lowercase() == norm)
            .ok_or_else(|| {
                let labels: Vec<&str> = Variant::ALL.iter().map(|v| v.label()).collect();
                Error::Config(format!("unknown variant {s:?}; expected one of {}", labels.join(", ")))
            })
    }
}

pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let v: Vec<Variant> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::Config("variant list is empty".into()));
    }
    Ok(v)
}

/// Outcome of one variant trained with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub proxy_fid: f64,
    pub pixel_moment: f64,
    /// SHA-256 over the digests of every real batch consumed.
    pub data_digest: String,
}

#[derive(Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub outcome: Result<Vec<SeedResult>>,
}

impl AblationRow {
    pub fn mean_proxy_fid(&self) -> Option<f64> {
        let r = self.outcome.as_ref().ok()?;
        Some(r.iter().map(|s| s.proxy_fid).sum::<f64>() / r.len() as f64)
    }

    pub fn mean_pixel_moment(&self) -> Option<f64> {
        let r = self.outcome.as_ref().ok()?;
        Some(r.iter().map(|s| s.pixel_moment).sum::<f64>() / r.len() as f64)
    }
}

fn reference_config(base: &TrainConfig) -> DiscriminatorConfig {
    DiscriminatorConfig {
        resolution: base.resolution,
        channels: base.channels,
        side: 4.min(base.resolution),
        base_width: REFERENCE_WIDTH,
    }
}

/// Trains `variant` with `seed` and scores its final generator with the
/// shared reference extractor.
pub fn run_variant(
    base: &TrainConfig,
    variant: Variant,
    seed: u64,
    dataset: Arc<Dataset>,
    out_dir: Option<PathBuf>,
) -> Result<SeedResult> {
    let cfg = TrainConfig {
        seed,
        ..variant.apply(base)
    };
    let mut trainer = Trainer::new(cfg, dataset)?;
    if let Some(dir) = &out_dir {
        trainer.attach_output(dir, false)?;
    }
    let mut hasher = Sha256::new();
    let total = trainer.total_steps();
    while trainer.step_count() < total {
        let rec = trainer.step()?;
        hasher.update(rec.batch_digest.as_bytes());
    }
    if let Some(dir) = &out_dir {
        trainer.save(&dir.join("final.ckpt"))?;
    }
    let (real, fake) = trainer.evaluation_sets(base.eval_samples)?;
    let mut reference = eval::reference_extractor(reference_config(base), REFERENCE_SEED)?;
    Ok(SeedResult {
        seed,
        proxy_fid: eval::proxy_fid(&mut reference, &real, &fake)?,
        pixel_moment: eval::pixel_moment_distance(&real, &fake)?,
        data_digest: hex::encode(hasher.finalize()),
    })
}

fn run_row(base: &TrainConfig, variant: Variant, seeds: &[u64], dataset: &Arc<Dataset>, write: bool) -> AblationRow {
    let outcome = seeds
        .iter()
        .map(|&seed| {
            let dir = write.then(|| {
                base.out_dir
                    .join(variant.label().replace('+', "_"))
                    .join(format!("seed_{seed}"))
            });
            log::info!("ablation: {variant} seed {seed}");
            run_variant(base, variant, seed, dataset.clone(), dir)
        })
        .collect();
    AblationRow { variant, outcome }
}

/// Runs every listed variant over every seed. A failing variant is reported
/// in its row and does not stop the others. With `parallel`, variants run on
/// separate threads that share only the read-only dataset.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    dataset: Arc<Dataset>,
    write_outputs: bool,
    parallel: bool,
) -> Vec<AblationRow> {
    if !parallel {
        return variants
            .iter()
            .map(|&v| run_row(base, v, seeds, &dataset, write_outputs))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .map(|&v| {
                let ds = dataset.clone();
                scope.spawn(move || run_row(base, v, seeds, &ds, write_outputs))
            })
            .collect();
        handles
            .into_iter()
            .zip(variants)
            .map(|(h, &variant)| {
                h.join().unwrap_or_else(|_| AblationRow {
                    variant,
                    outcome: Err(Error::Contract("variant thread panicked".into())),
                })
            })
            .collect()
    })
}

pub const TABLE_HEADER: &str = "method,status,proxy_fid_mean,pixel_moment_mean,seeds,per_seed_proxy_fid,data_digest";

/// Comma-separated table, one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for row in rows {
        let line = match &row.outcome {
            Ok(results) => {
                let seeds: Vec<String> = results.iter().map(|r| r.seed.to_string()).collect();
                let fids: Vec<String> = results.iter().map(|r| r.proxy_fid.to_string()).collect();
                let digests: Vec<&str> = results.iter().map(|r| &r.data_digest[..16]).collect();
                format!(
                    "{},ok,{},{},{},{},{}",
                    row.variant,
                    row.mean_proxy_fid().unwrap_or(f64::NAN),
                    row.mean_pixel_moment().unwrap_or(f64::NAN),
                    seeds.join(" "),
                    fids.join(" "),
                    digests.join(" ")
                )
            }
            Err(e) => format!("{},failed: {},,,,,", row.variant, e.to_string().replace(',', ";")),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// True when every successful row consumed identical data for each seed.
pub fn shares_data(rows: &[AblationRow]) -> bool {
    let digests: Vec<Vec<&str>> = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok())
        .map(|res| res.iter().map(|s| s.data_digest.as_str()).collect())
        .collect();
    digests.windows(2).all(|w| w[0] == w[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthKind;

    #[test]
    fn labels_parse_including_misspelling() {
        for v in Variant::ALL {
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("baseline+path8+Ada-OP".parse::<Variant>().unwrap(), Variant::Patch8AdaOp);
        assert_eq!("BASELINE+PATCH4".parse::<Variant>().unwrap(), Variant::Patch4);
        assert!("baseline+patch2".parse::<Variant>().is_err());
        assert_eq!(parse_variants(&TrainConfig::default().variants).unwrap(), Variant::ALL.to_vec());
    }

    #[test]
    fn variants_share_batches_and_failures_are_isolated() {
        let base = TrainConfig {
            steps: 3,
            batch_size: 4,
            latent_dim: 8,
            g_width: 4,
            d_width: 4,
            dataset_size: 16,
            eval_samples: 8,
            ..Default::default()
        };
        let ds = Arc::new(Dataset::synthetic(SynthKind::Shapes, 16, 16, 1).unwrap());
        let rows = run_ablation(&base, &Variant::ALL, &[1, 2], ds.clone(), false, false);
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.outcome.is_ok()));
        assert!(shares_data(&rows));
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 6);
        for v in Variant::ALL {
            assert!(table.contains(&format!("\n{},ok,", v.label())));
        }

        let parallel = run_ablation(&base, &[Variant::Baseline, Variant::Patch4AdaOp], &[1, 2], ds.clone(), false, true);
        assert_eq!(parallel[0].outcome.as_ref().unwrap(), rows[0].outcome.as_ref().unwrap());
        assert_eq!(parallel[1].outcome.as_ref().unwrap(), rows[3].outcome.as_ref().unwrap());

        // a dataset of the wrong resolution makes every run fail; each row
        // reports its own error and a mixed table keeps the good rows
        let bad = Arc::new(Dataset::synthetic(SynthKind::Shapes, 16, 32, 1).unwrap());
        let failed = run_ablation(&base, &[Variant::Baseline, Variant::Patch4], &[1], bad, false, false);
        assert!(failed.iter().all(|r| r.outcome.is_err()));
        let mut mixed = failed;
        mixed.push(rows.into_iter().nth(2).unwrap());
        let table = format_table(&mixed);
        assert!(table.contains("\nbaseline,failed: config error"));
        assert!(table.contains("\nbaseline+patch8,ok,"));
        assert!(shares_data(&mixed));
    }
}
