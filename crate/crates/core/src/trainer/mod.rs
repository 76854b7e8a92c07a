//! The alternating training loop: one hinge discriminator update followed by
//! `k_g` generator updates whose objective is picked from the fake batch's
//! score dispersion.

mod checkpoint;
mod config;
pub mod eval;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Container, MAGIC, VERSION};
pub use config::{valid_keys, TrainConfig, KEYS};
pub use eval::EvalReport;

use crate::adaop::{
    decide, discriminator_loss, global_generator_loss, local_generator_loss, select_mask, Branch, LocalLevel,
    OptimizationMode,
};
use crate::data::{batch_digest, BatchStream, Dataset, StreamState};
use crate::error::{Error, Result};
use crate::models::{Discriminator, FeatureMap, Generator};
use crate::nn::{apply_sn_scope, Adam, Mode, Module, Param};
use crate::patchmetrics::{self, DispersionReport};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;
const SAMPLE_COUNT: usize = 16;

pub const METRICS_HEADER: &str = "step,d_loss,g_loss,sigma,sigma_bar,mode,level,selected_count,batch_digest";
pub const DECISIONS_HEADER: &str = "step,g_iter,sigma,sigma_bar,mode,level,alpha,selected_count,fallback";

/// One generator iteration as recorded in the decision log.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRecord {
    pub step: u64,
    pub g_iter: usize,
    pub sigma: f64,
    pub sigma_bar: f64,
    /// Objective actually applied.
    pub mode: OptimizationMode,
    /// Local level chosen by the rule (kept on fallback).
    pub level: Option<LocalLevel>,
    pub alpha: Option<f64>,
    pub selected_count: usize,
    /// The rule asked for a local step but no cell fell below α.
    pub fallback: bool,
    pub g_loss: f64,
}

impl GeneratorRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.g_iter,
            self.sigma,
            self.sigma_bar,
            self.mode,
            self.level.map(|l| l.to_string()).unwrap_or_default(),
            self.alpha.map(|a| a.to_string()).unwrap_or_default(),
            self.selected_count,
            self.fallback as u8
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub d_loss: f64,
    pub generator: Vec<GeneratorRecord>,
    pub batch_digest: String,
}

impl StepRecord {
    pub fn last(&self) -> &GeneratorRecord {
        self.generator.last().expect("k_g ≥ 1")
    }

    pub fn csv_row(&self) -> String {
        let g = self.last();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.d_loss,
            g.g_loss,
            g.sigma,
            g.sigma_bar,
            g.mode,
            g.level.map(|l| l.to_string()).unwrap_or_default(),
            g.selected_count,
            self.batch_digest
        )
    }
}

struct RunLogs {
    metrics: BufWriter<File>,
    decisions: BufWriter<File>,
}

impl RunLogs {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(w)
        };
        Ok(RunLogs {
            metrics: open("metrics.csv", METRICS_HEADER)?,
            decisions: open("decisions.csv", DECISIONS_HEADER)?,
        })
    }

    fn record(&mut self, dir: &Path, rec: &StepRecord) -> Result<()> {
        let err = |e| Error::io(dir, e);
        writeln!(self.metrics, "{}", rec.csv_row()).map_err(err)?;
        for g in &rec.generator {
            writeln!(self.decisions, "{}", g.csv_row()).map_err(err)?;
        }
        self.metrics.flush().map_err(err)?;
        self.decisions.flush().map_err(err)
    }
}

/// Complete training state: both networks, their optimizers, the data
/// position and the noise generator.
pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    opt_g: Adam,
    opt_d: Adam,
    stream: BatchStream,
    rng: ChaCha8Rng,
    step: u64,
    out: Option<(PathBuf, RunLogs)>,
}

impl Trainer {
    /// Fresh networks initialized from `config.seed`.
    pub fn new(config: TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        if dataset.resolution != config.resolution || dataset.channels != config.channels {
            return Err(Error::Config(format!(
                "dataset is {}×{} with {} channels, config wants {}×{} with {}",
                dataset.resolution, dataset.resolution, dataset.channels, config.resolution, config.resolution, config.channels
            )));
        }
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        init.set_stream(INIT_STREAM);
        let mut generator = Generator::new(config.generator_config(), &mut init)?;
        let mut discriminator = Discriminator::new(config.discriminator_config(), &mut init)?;
        apply_sn_scope(&mut generator, &mut discriminator, config.sn_scope, &mut init);
        let opt_g = Adam::new(&generator.parameters(), config.adam_g())?;
        let opt_d = Adam::new(&discriminator.parameters(), config.adam_d())?;
        let stream = BatchStream::new(dataset, config.batch_size, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            stream,
            rng,
            step: 0,
            out: None,
        })
    }

    /// Builds the dataset named by the config, then a fresh trainer.
    pub fn from_config(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let ds = Dataset::from_source(&config.data_source()?, config.resolution, config.channels)?;
        for (path, why) in &ds.skipped {
            log::warn!("skipped {}: {why}", path.display());
        }
        Self::new(config, Arc::new(ds))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn discriminator_mut(&mut self) -> &mut Discriminator {
        &mut self.discriminator
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        self.stream.dataset()
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.stream.batches_per_epoch())
    }

    /// Directs logs, samples and checkpoints into `dir`. With `append`, existing
    /// logs are extended rather than replaced.
    pub fn attach_output(&mut self, dir: &Path, append: bool) -> Result<()> {
        let logs = RunLogs::open(dir, append)?;
        self.out = Some((dir.to_path_buf(), logs));
        Ok(())
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.out.as_ref().map(|(d, _)| d.as_path())
    }

    fn sample_noise(&mut self, n: usize) -> Tensor {
        Tensor::randn(&[n, self.config.latent_dim], 1.0, &mut self.rng)
    }

    fn discriminator_step(&mut self, real: &Tensor, fake: &Tensor) -> Result<f64> {
        self.discriminator.set_trainable(true);
        let real_scores = self.discriminator.forward(real, Mode::Train)?;
        let fake_scores = self.discriminator.forward(&fake.detach(), Mode::Train)?;
        let loss = discriminator_loss(&real_scores, &fake_scores)?;
        let value = loss.item();
        self.check_finite(value, "discriminator loss")?;
        let params = self.discriminator.parameters();
        params.iter().for_each(|p| p.tensor.zero_grad());
        loss.backward()?;
        self.opt_d.step(&params)?;
        Ok(value)
    }

    fn generator_iteration(&mut self, fake: &Tensor, g_iter: usize) -> Result<GeneratorRecord> {
        self.discriminator.set_trainable(false);
        let scores = self.discriminator.forward(fake, Mode::Eval)?;
        if !scores.values.all_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                what: "discriminator scores".into(),
            });
        }
        let report = DispersionReport::from_map(&scores);
        let decision = decide(&report, &self.config.adaop)?;
        let branch = if self.config.ada_op { decision.branch } else { Branch::Global };
        let cells = scores.values.numel();

        let (loss, mode, selected_count, fallback) = match branch {
            Branch::Global => (global_generator_loss(&scores)?, OptimizationMode::Global, cells, false),
            Branch::Local { alpha, .. } => {
                let mask = select_mask(&scores, alpha)?;
                let local = local_generator_loss(&scores, &mask)?;
                if local.empty_mask {
                    (global_generator_loss(&scores)?, OptimizationMode::Global, 0, true)
                } else {
                    (local.loss, OptimizationMode::Local, mask.selected_count, false)
                }
            }
        };
        let value = loss.item();
        self.check_finite(value, "generator loss")?;
        let params = self.generator.parameters();
        params.iter().for_each(|p| p.tensor.zero_grad());
        loss.backward()?;
        self.opt_g.step(&params)?;
        self.discriminator.set_trainable(true);

        let (level, alpha) = match branch {
            Branch::Local { level, alpha } => (Some(level), Some(alpha)),
            Branch::Global => (None, None),
        };
        Ok(GeneratorRecord {
            step: self.step,
            g_iter,
            sigma: report.sigma_global,
            sigma_bar: report.sigma_local_bar,
            mode,
            level,
            alpha,
            selected_count,
            fallback,
            g_loss: value,
        })
    }

    fn check_finite(&self, value: f64, what: &str) -> Result<()> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                step: self.step,
                what: format!("{what} ({value})"),
            })
        }
    }

    fn check_parameters(&self) -> Result<()> {
        let params = self.generator.parameters().into_iter().chain(self.discriminator.parameters());
        for p in params {
            if !p.tensor.all_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    what: format!("parameter `{}`", p.name),
                });
            }
        }
        Ok(())
    }

    fn step_inner(&mut self) -> Result<StepRecord> {
        let real = self.stream.next_batch()?;
        let digest = batch_digest(&real);
        let z = self.sample_noise(self.config.batch_size);
        let mut fake = self.generator.forward(&z, Mode::Train)?;
        let d_loss = self.discriminator_step(&real, &fake)?;
        let mut generator = Vec::with_capacity(self.config.k_g);
        for t in 0..self.config.k_g {
            if t > 0 {
                fake = self.generator.forward(&z, Mode::Train)?;
            }
            generator.push(self.generator_iteration(&fake, t)?);
        }
        self.check_parameters()?;
        Ok(StepRecord {
            step: self.step,
            d_loss,
            generator,
            batch_digest: digest,
        })
    }

    /// One discriminator update and `k_g` generator updates. A non-finite
    /// loss or parameter aborts with a diagnostic checkpoint when an output
    /// directory is attached.
    pub fn step(&mut self) -> Result<StepRecord> {
        let rec = match self.step_inner() {
            Ok(rec) => rec,
            Err(e @ Error::NonFinite { .. }) => {
                if let Some(dir) = self.output_dir().map(Path::to_path_buf) {
                    let path = dir.join(format!("abort_step_{}.ckpt", self.step));
                    match self.save(&path) {
                        Ok(()) => log::error!("{e}; state written to {}", path.display()),
                        Err(save) => log::error!("{e}; abort checkpoint failed: {save}"),
                    }
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        self.step += 1;
        if let Some((dir, logs)) = &mut self.out {
            logs.record(dir, &rec)?;
        }
        self.periodic_outputs()?;
        Ok(rec)
    }

    fn periodic_outputs(&mut self) -> Result<()> {
        let Some(dir) = self.output_dir().map(Path::to_path_buf) else {
            return Ok(());
        };
        let every = self.config.sample_every;
        if every > 0 && self.step % every == 0 {
            self.write_samples(&dir.join("samples").join(format!("step_{:06}", self.step)))?;
        }
        let every = self.config.checkpoint_every;
        if every > 0 && self.step % every == 0 {
            self.save(&dir.join("checkpoints").join(format!("step_{:06}.ckpt", self.step)))?;
        }
        Ok(())
    }

    /// Runs until the configured number of steps, then writes `final.ckpt`
    /// when an output directory is attached.
    pub fn train(&mut self) -> Result<Vec<StepRecord>> {
        let total = self.total_steps();
        let mut records = Vec::new();
        while self.step < total {
            let rec = self.step()?;
            if rec.step % 100 == 0 {
                let g = rec.last();
                log::info!(
                    "step {} d_loss {:.4} g_loss {:.4} σ {:.4} σ̄ {:.4} {}",
                    rec.step,
                    rec.d_loss,
                    g.g_loss,
                    g.sigma,
                    g.sigma_bar,
                    g.mode
                );
            }
            records.push(rec);
        }
        if let Some(dir) = self.output_dir().map(Path::to_path_buf) {
            self.save(&dir.join("final.ckpt"))?;
        }
        Ok(records)
    }

    /// Fixed evaluation noise, independent of the training stream.
    pub fn fixed_noise(&self, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(SAMPLE_STREAM);
        Tensor::randn(&[n, self.config.latent_dim], 1.0, &mut rng)
    }

    /// Writes a sample grid and per-sample heatmaps into `dir`. Inference
    /// mode only, so the training trajectory is unaffected.
    pub fn write_samples(&mut self, dir: &Path) -> Result<()> {
        let z = self.fixed_noise(SAMPLE_COUNT);
        let images = eval::generate(&mut self.generator, &z)?;
        write_image_grid(&images, &dir.join("grid.png"))?;
        if self.config.side >= 2 {
            let count = self.config.heatmap_count.min(SAMPLE_COUNT);
            let scores = self.discriminator.forward(&images, Mode::Eval)?;
            for k in 0..count {
                patchmetrics::export_heatmap(&scores, k, &images, &dir.join(format!("heatmap_{k}.png")))?;
            }
        }
        Ok(())
    }

    /// Real and generated sets of `n` images drawn from a seeded
    /// evaluation stream.
    pub fn evaluation_sets(&mut self, n: usize) -> Result<(Tensor, Tensor)> {
        let ds = self.stream.dataset().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(EVAL_STREAM);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let take: Vec<usize> = order.into_iter().cycle().take(n).collect();
        let real = ds.gather(&take)?;
        let z = Tensor::randn(&[n, self.config.latent_dim], 1.0, &mut rng);
        let fake = eval::generate(&mut self.generator, &z)?;
        Ok((real, fake))
    }

    /// Proxy metrics of the current generator using this run's own
    /// discriminator as feature extractor.
    pub fn evaluate(&mut self, n: usize) -> Result<EvalReport> {
        let (real, fake) = self.evaluation_sets(n)?;
        eval::evaluate_sets(&mut self.discriminator, &real, &fake)
    }

    /// Scores for a batch of generated images in inference mode.
    pub fn score(&mut self, images: &Tensor) -> Result<FeatureMap> {
        self.discriminator.forward(images, Mode::Eval)
    }

    fn to_container(&mut self) -> Container {
        let mut c = Container::new();
        c.push_bytes("config", self.config.to_text().into_bytes());
        let stream = self.stream.state();
        let word = self.rng.get_word_pos();
        c.push_u64(
            "state",
            &[
                self.step,
                stream.epoch,
                stream.cursor as u64,
                self.rng.get_stream(),
                word as u64,
                (word >> 64) as u64,
                self.opt_g.t,
                self.opt_d.t,
            ],
        );
        c.push_bytes("rng_seed", self.rng.get_seed().to_vec());
        for p in self.generator.parameters().iter().chain(&self.discriminator.parameters()) {
            c.push_f64(format!("param:{}", p.name), &p.tensor.data());
        }
        let mut bufs = Vec::new();
        self.generator.buffers("gen", &mut bufs);
        self.discriminator.buffers("disc", &mut bufs);
        for b in bufs {
            c.push_f64(format!("buffer:{}", b.name), b.values);
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (i, name) in opt.names().iter().enumerate() {
                let (m, v) = opt.moments(i);
                c.push_f64(format!("{tag}.m:{name}"), m);
                c.push_f64(format!("{tag}.v:{name}"), v);
            }
        }
        c
    }

    pub fn checkpoint_bytes(&mut self) -> Vec<u8> {
        self.to_container().encode()
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    /// Restores a checkpoint, rebuilding the dataset its configuration names.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let config = TrainConfig::parse_text(&c.text("config")?)?;
        let ds = Dataset::from_source(&config.data_source()?, config.resolution, config.channels)?;
        Self::restore(&c, config, Arc::new(ds))
    }

    /// Restores a checkpoint over an already-built dataset.
    pub fn load_with_dataset(path: &Path, dataset: Arc<Dataset>) -> Result<Self> {
        let c = Container::read(path)?;
        let config = TrainConfig::parse_text(&c.text("config")?)?;
        Self::restore(&c, config, dataset)
    }

    /// Reads only the configuration stored in a checkpoint.
    pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
        TrainConfig::parse_text(&Container::read(path)?.text("config")?)
    }

    fn restore(c: &Container, config: TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        let mut t = Trainer::new(config, dataset)?;
        let state = c.u64s("state")?;
        let [step, epoch, cursor, rng_stream, word_lo, word_hi, tg, td] = state[..] else {
            return Err(Error::Checkpoint(format!("section `state` holds {} values, expected 8", state.len())));
        };
        let seed: [u8; 32] = c
            .bytes("rng_seed")?
            .try_into()
            .map_err(|_| Error::Checkpoint("section `rng_seed` must hold 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rng_stream);
        rng.set_word_pos(((word_hi as u128) << 64) | word_lo as u128);
        t.rng = rng;
        t.step = step;
        t.stream.restore(StreamState {
            epoch,
            cursor: cursor as usize,
        })?;

        let params: Vec<Param> = t.generator.parameters().into_iter().chain(t.discriminator.parameters()).collect();
        for p in &params {
            let v = c.f64s_exact(&format!("param:{}", p.name), p.tensor.numel())?;
            p.tensor.update_data(|d| d.copy_from_slice(&v))?;
        }
        let mut bufs = Vec::new();
        t.generator.buffers("gen", &mut bufs);
        t.discriminator.buffers("disc", &mut bufs);
        for b in bufs {
            let v = c.f64s_exact(&format!("buffer:{}", b.name), b.values.len())?;
            b.values.copy_from_slice(&v);
        }
        for (tag, opt, steps) in [("adam_g", &mut t.opt_g, tg), ("adam_d", &mut t.opt_d, td)] {
            opt.t = steps;
            for i in 0..opt.names.len() {
                let name = &opt.names[i];
                let n = opt.m[i].len();
                opt.m[i] = c.f64s_exact(&format!("{tag}.m:{name}"), n)?;
                opt.v[i] = c.f64s_exact(&format!("{tag}.v:{name}"), n)?;
            }
        }
        Ok(t)
    }
}

/// Tiles a `[N, C, H, W]` batch (values in `[−1, 1]`) into a near-square PNG grid.
pub fn write_image_grid(images: &Tensor, path: &Path) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || (s[1] != 1 && s[1] != 3) {
        return Err(Error::invalid("write_image_grid", format!("expected [N, 1|3, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    let rows = n.div_ceil(cols);
    let data = images.data();
    let mut img = image::RgbImage::new((cols * w) as u32, (rows * h) as u32);
    let to_byte = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    for k in 0..n {
        let (gy, gx) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_byte(data[((k * c + ch) * h + y) * w + x]);
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                img.put_pixel((gx * w + x) as u32, (gy * h + y) as u32, image::Rgb(rgb));
            }
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
