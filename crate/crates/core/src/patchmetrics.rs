//! Batch-level and per-image dispersion of patch scores, and heatmap export.
//!
//! Both statistics are population variances: division by the sample count
//! and no square root.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::models::FeatureMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DispersionReport {
    pub mu_k: Vec<f64>,
    pub mu: f64,
    pub sigma_global: f64,
    pub sigma_k: Vec<f64>,
    pub sigma_local_bar: f64,
}

impl DispersionReport {
    pub fn from_map(y: &FeatureMap) -> Self {
        let mu_k = compute_mu_k(y);
        let mu = mean(&mu_k);
        let sigma_global = compute_sigma_global(&mu_k);
        let (sigma_k, sigma_local_bar) = compute_sigma_k_and_bar(y, &mu_k);
        DispersionReport {
            mu_k,
            mu,
            sigma_global,
            sigma_k,
            sigma_local_bar,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    // a constant sequence must yield its value exactly so its dispersion is 0
    if xs.iter().all(|&x| x == xs[0]) {
        return xs[0];
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn second_moment(xs: &[f64], center: f64) -> f64 {
    xs.iter().map(|x| (x - center) * (x - center)).sum::<f64>() / xs.len() as f64
}

/// Mean score of each image.
pub fn compute_mu_k(y: &FeatureMap) -> Vec<f64> {
    let n = y.cells();
    y.values.data().chunks(n).map(mean).collect()
}

/// Dispersion of per-image means around the batch mean.
pub fn compute_sigma_global(mu_k: &[f64]) -> f64 {
    if mu_k.is_empty() {
        return 0.0;
    }
    second_moment(mu_k, mean(mu_k))
}

/// Per-image dispersion of cell scores around `mu_k`, and its batch mean.
pub fn compute_sigma_k_and_bar(y: &FeatureMap, mu_k: &[f64]) -> (Vec<f64>, f64) {
    let n = y.cells();
    let sigma_k: Vec<f64> = y
        .values
        .data()
        .chunks(n)
        .zip(mu_k)
        .map(|(cells, &m)| second_moment(cells, m))
        .collect();
    let bar = if sigma_k.is_empty() { 0.0 } else { mean(&sigma_k) };
    (sigma_k, bar)
}

/// Sidecar path holding the raw scores for a heatmap image.
pub fn scores_path(image_path: &Path) -> PathBuf {
    image_path.with_extension("txt")
}

/// Raw `h×w` scores of image `k`, one row per line.
pub fn format_score_grid(y: &FeatureMap, k: usize) -> String {
    let scores = y.image_scores(k);
    let mut out = String::new();
    for row in scores.chunks(y.width()) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Inverse of [`format_score_grid`]: returns the grid as rows.
pub fn parse_score_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::invalid("parse_score_grid", format!("{t:?}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::invalid("parse_score_grid", "ragged rows"));
    }
    Ok(rows)
}

/// Heat color for a score normalized to `t ∈ [0, 1]`: low is red, high is blue.
pub fn heat_color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    Rgb([(255.0 * (1.0 - t)).round() as u8, 0, (255.0 * t).round() as u8])
}

/// Renders image `k` (values in `[−1, 1]`) beside its nearest-neighbour
/// upsampled score map.
pub fn render_heatmap(y: &FeatureMap, k: usize, image: &Tensor) -> Result<RgbImage> {
    let s = image.shape();
    if s.len() != 4 || k >= s[0] || (s[1] != 1 && s[1] != 3) || k >= y.batch() {
        return Err(Error::invalid("export_heatmap", format!("image batch {s:?} does not hold image {k}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let (gh, gw) = (y.height(), y.width());
    if h % gh != 0 || w % gw != 0 {
        return Err(Error::invalid("export_heatmap", format!("{gh}×{gw} grid does not tile {h}×{w} image")));
    }
    let scores = y.image_scores(k);
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };

    let data = image.data();
    let base = k * c * h * w;
    let to_byte = |v: f64| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
    let mut out = RgbImage::new(2 * w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let px = |ch: usize| to_byte(data[base + ch * h * w + row * w + col]);
            let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
            out.put_pixel(col as u32, row as u32, Rgb(rgb));
            let cell = (row / (h / gh)) * gw + col / (w / gw);
            out.put_pixel((w + col) as u32, row as u32, heat_color(norm(scores[cell])));
        }
    }
    Ok(out)
}

/// Writes the side-by-side heatmap PNG to `path` and raw scores to its
/// `.txt` sidecar.
pub fn export_heatmap(y: &FeatureMap, k: usize, image: &Tensor, path: &Path) -> Result<()> {
    let img = render_heatmap(y, k, image)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })?;
    let txt = scores_path(path);
    std::fs::write(&txt, format_score_grid(y, k)).map_err(|e| Error::io(&txt, e))
}
