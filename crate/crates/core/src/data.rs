//! Synthetic image populations, image-directory ingestion and seeded batching.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    /// Anti-aliased circles and rectangles on a dark background.
    Shapes,
    /// Linear ramps overlaid with a sinusoidal texture.
    Gradients,
}

impl SynthKind {
    fn tag(self) -> u64 {
        match self {
            SynthKind::Shapes => 0x5348_4150,
            SynthKind::Gradients => 0x4752_4144,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Shapes => "shapes",
            SynthKind::Gradients => "gradients",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(SynthKind::Shapes),
            "gradients" => Ok(SynthKind::Gradients),
            _ => Err(Error::Config(format!("unknown synthetic dataset {s:?} (expected shapes or gradients)"))),
        }
    }
}

/// Where a dataset's images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic { kind: SynthKind, size: usize },
    Directory(PathBuf),
}

const SUPERSAMPLE: usize = 4;

/// Deterministic image `index` of a synthetic population as `[C, R, R]`
/// values in `[−1, 1]`.
pub fn synth_generate(kind: SynthKind, index: u64, resolution: usize, channels: usize) -> Result<Vec<f64>> {
    if resolution == 0 || (channels != 1 && channels != 3) {
        return Err(Error::Config(format!(
            "synthetic images need resolution ≥ 1 and 1 or 3 channels, got {resolution}, {channels}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(kind.tag());
    rng.set_stream(index);
    let out = match kind {
        SynthKind::Shapes => draw_shapes(&mut rng, resolution, channels),
        SynthKind::Gradients => draw_gradient(&mut rng, resolution, channels),
    };
    Ok(out.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}

enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => (x0..=x1).contains(&x) && (y0..=y1).contains(&y),
        }
    }
}

fn draw_shapes(rng: &mut ChaCha8Rng, res: usize, channels: usize) -> Vec<f64> {
    let background: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..-0.6)).collect();
    let mut img: Vec<f64> = background.iter().flat_map(|&b| std::iter::repeat_n(b, res * res)).collect();
    let count = rng.random_range(1..=2);
    for _ in 0..count {
        // coordinates in units of the image side
        let shape = if rng.random_bool(0.5) {
            Shape::Circle {
                cx: rng.random_range(0.25..0.75),
                cy: rng.random_range(0.25..0.75),
                r: rng.random_range(0.12..0.3),
            }
        } else {
            let (w, h) = (rng.random_range(0.2..0.5), rng.random_range(0.2..0.5));
            let (x0, y0) = (rng.random_range(0.05..0.95 - w), rng.random_range(0.05..0.95 - h));
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        };
        let color: Vec<f64> = (0..channels).map(|_| rng.random_range(0.2..1.0)).collect();
        for py in 0..res {
            for px in 0..res {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64) / res as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64) / res as f64;
                        hits += shape.covers(x, y) as usize;
                    }
                }
                let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                if cover > 0.0 {
                    for (c, &col) in color.iter().enumerate() {
                        let v = &mut img[c * res * res + py * res + px];
                        *v = *v * (1.0 - cover) + col * cover;
                    }
                }
            }
        }
    }
    img
}

fn draw_gradient(rng: &mut ChaCha8Rng, res: usize, channels: usize) -> Vec<f64> {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let freq = rng.random_range(2.0..6.0);
    let tex_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (tx, ty) = (tex_angle.cos(), tex_angle.sin());
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.1..0.3);
    let mut img = Vec::with_capacity(channels * res * res);
    for _ in 0..channels {
        let (lo, hi) = (rng.random_range(-1.0..-0.2), rng.random_range(0.2..1.0));
        for py in 0..res {
            for px in 0..res {
                let x = (px as f64 + 0.5) / res as f64 - 0.5;
                let y = (py as f64 + 0.5) / res as f64 - 0.5;
                let t = (x * dx + y * dy) / std::f64::consts::SQRT_2 + 0.5;
                let texture = amp * (std::f64::consts::TAU * freq * (x * tx + y * ty) + phase).sin();
                img.push(lo + (hi - lo) * t + texture);
            }
        }
    }
    img
}

/// An in-memory image set with every image stored as `[C, R, R]` values in
/// `[−1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: DataSource,
    pub resolution: usize,
    pub channels: usize,
    images: Vec<f64>,
    len: usize,
    /// Files passed over during directory ingestion, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn synthetic(kind: SynthKind, size: usize, resolution: usize, channels: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("synthetic dataset size must be positive".into()));
        }
        let mut images = Vec::with_capacity(size * channels * resolution * resolution);
        for i in 0..size {
            images.extend(synth_generate(kind, i as u64, resolution, channels)?);
        }
        Ok(Dataset {
            source: DataSource::Synthetic { kind, size },
            resolution,
            channels,
            images,
            len: size,
            skipped: Vec::new(),
        })
    }

    pub fn from_source(source: &DataSource, resolution: usize, channels: usize) -> Result<Self> {
        match source {
            DataSource::Synthetic { kind, size } => Self::synthetic(*kind, *size, resolution, channels),
            DataSource::Directory(path) => load_directory(path, resolution, channels),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Stacks the listed images into `[len, C, R, R]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len {
                return Err(Error::OutOfBounds(format!("image {i} of {}", self.len)));
            }
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(data, &[indices.len(), self.channels, self.resolution, self.resolution])
    }
}

fn is_image_candidate(path: &Path) -> bool {
    path.is_file()
        && !path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
}

/// Decodes every image in `path` (sorted by file name), center-crops it to a
/// square and resizes it bilinearly to `resolution`. Undecodable files are
/// skipped with a warning.
pub fn load_directory(path: &Path, resolution: usize, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("image channels must be 1 or 3, got {channels}")));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| is_image_candidate(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    let mut len = 0;
    for file in files {
        let decoded = match image::open(&file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped.push((file, e.to_string()));
                continue;
            }
        };
        let (w, h) = (decoded.width(), decoded.height());
        let side = w.min(h);
        let square = decoded.crop_imm((w - side) / 2, (h - side) / 2, side, side);
        let r = resolution as u32;
        let resized = square.resize_exact(r, r, FilterType::Triangle);
        let to_unit = |b: u8| b as f64 / 127.5 - 1.0;
        if channels == 1 {
            images.extend(resized.to_luma8().into_raw().into_iter().map(to_unit));
        } else {
            let rgb = resized.to_rgb8().into_raw();
            for c in 0..3 {
                images.extend(rgb.iter().skip(c).step_by(3).map(|&b| to_unit(b)));
            }
        }
        len += 1;
    }
    if len == 0 {
        return Err(Error::Config(format!("no decodable images in {}", path.display())));
    }
    Ok(Dataset {
        source: DataSource::Directory(path.to_path_buf()),
        resolution,
        channels,
        images,
        len,
        skipped,
    })
}

/// Resumable position of a [`BatchStream`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Seeded, drop-last iteration over a dataset. The order within an epoch
/// depends only on the seed and the epoch index.
#[derive(Debug, Clone)]
pub struct BatchStream {
    dataset: Arc<Dataset>,
    batch: usize,
    seed: u64,
    state: StreamState,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(dataset: Arc<Dataset>, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || dataset.len() < batch {
            return Err(Error::Config(format!(
                "dataset of {} images cannot fill a batch of {batch}",
                dataset.len()
            )));
        }
        let order = epoch_order(dataset.len(), seed, 0);
        Ok(BatchStream {
            dataset,
            batch,
            seed,
            state: StreamState { epoch: 0, cursor: 0 },
            order,
        })
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch
    }

    pub fn state(&self) -> StreamState {
        self.state
    }

    pub fn restore(&mut self, state: StreamState) -> Result<()> {
        if state.cursor > self.dataset.len() {
            return Err(Error::Checkpoint(format!("stream cursor {} beyond dataset", state.cursor)));
        }
        self.order = epoch_order(self.dataset.len(), self.seed, state.epoch);
        self.state = state;
        Ok(())
    }

    /// Dataset indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.state.cursor + self.batch > self.order.len() {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order = epoch_order(self.dataset.len(), self.seed, self.state.epoch);
        }
        let c = self.state.cursor;
        self.state.cursor += self.batch;
        self.order[c..c + self.batch].to_vec()
    }

    pub fn next_batch(&mut self) -> Result<Tensor> {
        let idx = self.next_indices();
        self.dataset.gather(&idx)
    }
}

fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// SHA-256 over the shape and little-endian values of a batch.
pub fn batch_digest(batch: &Tensor) -> String {
    let mut h = Sha256::new();
    for &d in batch.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in batch.data().iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}
