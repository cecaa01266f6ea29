//! Dataset statistics: mean image, intensity histogram, pairwise correlation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{to_grayscale, write_netpbm, BinaryMask, ImageU8};
use crate::plot::{self, Axes};

fn check_uniform(images: &[&ImageU8]) -> Result<()> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("no images to summarize".into()))?;
    for (i, img) in images.iter().enumerate() {
        if (img.width, img.height, img.channels) != (first.width, first.height, first.channels) {
            return Err(Error::Shape(format!(
                "image {i} is {}x{}x{}, image 0 is {}x{}x{}",
                img.width, img.height, img.channels, first.width, first.height, first.channels
            )));
        }
    }
    Ok(())
}

/// Per-pixel, per-channel mean, rounded half up.
pub fn mean_image(images: &[ImageU8]) -> Result<ImageU8> {
    let refs: Vec<&ImageU8> = images.iter().collect();
    check_uniform(&refs)?;
    let first = &images[0];
    let n = images.len() as u64;
    let mut sums = vec![0u64; first.data.len()];
    for img in images {
        for (s, &v) in sums.iter_mut().zip(&img.data) {
            *s += v as u64;
        }
    }
    let data = sums.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8).collect();
    ImageU8::new(first.width, first.height, first.channels, data)
}

/// Fraction of images marking each pixel as vessel, scaled to 0..=255.
pub fn mean_mask(masks: &[BinaryMask]) -> Result<ImageU8> {
    let images: Vec<ImageU8> = masks.iter().map(BinaryMask::to_u8).collect();
    mean_image(&images)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramU8 {
    pub counts: [u64; 256],
    pub total: u64,
}

impl Default for HistogramU8 {
    fn default() -> Self {
        HistogramU8 { counts: [0; 256], total: 0 }
    }
}

impl std::ops::Add for HistogramU8 {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        for (a, b) in self.counts.iter_mut().zip(o.counts) {
            *a += b;
        }
        self.total += o.total;
        self
    }
}

/// Pooled counts over every byte of every image, all channels included.
pub fn pixel_histogram(images: &[ImageU8]) -> Result<HistogramU8> {
    if images.is_empty() {
        return Err(Error::Data("no images to summarize".into()));
    }
    let mut h = HistogramU8::default();
    for img in images {
        for &v in &img.data {
            h.counts[v as usize] += 1;
        }
        h.total += img.data.len() as u64;
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub ids: Vec<String>,
    /// Row-major `n x n`, symmetric with unit diagonal.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Coefficients for `i < j`, row by row.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .collect()
    }
}

/// Pearson correlation of the flattened grayscale pixels of every pair.
pub fn pairwise_correlation(images: &[(String, ImageU8)]) -> Result<CorrelationMatrix> {
    if images.len() < 2 {
        return Err(Error::Data(format!("correlation needs at least 2 images, got {}", images.len())));
    }
    let refs: Vec<&ImageU8> = images.iter().map(|(_, img)| img).collect();
    check_uniform(&refs)?;

    // Centered as n*x - sum so that exact affine relations stay exact.
    let centered: Vec<(Vec<f64>, f64)> = images
        .par_iter()
        .map(|(id, img)| {
            let gray = if img.channels == 3 { to_grayscale(img)? } else { img.clone() };
            let n = gray.data.len() as i64;
            let sum: i64 = gray.data.iter().map(|&v| v as i64).sum();
            let c: Vec<f64> = gray.data.iter().map(|&v| (n * v as i64 - sum) as f64).collect();
            let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::UndefinedMetric(format!(
                    "correlation with image {id} is undefined: it has zero variance"
                )));
            }
            Ok((c, norm))
        })
        .collect::<Result<_>>()?;

    let n = images.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let coeffs: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, na) = &centered[i];
            let (b, nb) = &centered[j];
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (dot / (na * nb)).clamp(-1.0, 1.0)
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    for (&(i, j), &r) in pairs.iter().zip(&coeffs) {
        values[i * n + j] = r;
        values[j * n + i] = r;
    }
    Ok(CorrelationMatrix {
        ids: images.iter().map(|(id, _)| id.clone()).collect(),
        values,
    })
}

/// Counts of off-diagonal coefficients in `bins` equal-width bins over
/// [-1, 1], as `(lo, hi, count)`. The last bin is closed on the right.
pub fn correlation_histogram(matrix: &CorrelationMatrix, bins: usize) -> Result<Vec<(f64, f64, u64)>> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let width = 2.0 / bins as f64;
    let mut counts = vec![0u64; bins];
    for r in matrix.off_diagonal() {
        let k = (((r + 1.0) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (-1.0 + k as f64 * width, -1.0 + (k + 1) as f64 * width, c))
        .collect())
}

pub const CORRELATION_BINS: usize = 20;

pub fn format_pixel_histogram(h: &HistogramU8) -> String {
    let mut out = String::from("bin,count\n");
    for (bin, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{bin},{c}");
    }
    out
}

pub fn format_correlation_histogram(bins: &[(f64, f64, u64)]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in bins {
        let _ = writeln!(out, "{lo:.2},{hi:.2},{c}");
    }
    out
}

pub fn correlation_svg(bins: &[(f64, f64, u64)]) -> String {
    let max = bins.iter().map(|b| b.2).max().unwrap_or(0).max(1) as f64;
    let bars: Vec<(f64, f64, f64)> = bins.iter().map(|&(lo, hi, c)| (lo, hi, c as f64)).collect();
    let axes = Axes {
        title: "Pairwise image correlation",
        x_label: "Pearson correlation",
        y_label: "pairs",
        x_range: (-1.0, 1.0),
        y_range: (0.0, max),
    };
    plot::bar_chart(&axes, &bars)
}

/// Writes the mean image (`mean_image.pgm`, plus `mean_image.ppm` for
/// color input), `mean_mask.pgm`, `pixel_hist.csv`, `corr_hist.csv` and
/// `corr_hist.svg` into `out_dir`.
pub fn write_stats(images: &[(String, ImageU8)], masks: &[BinaryMask], out_dir: &Path) -> Result<()> {
    let raw: Vec<ImageU8> = images.iter().map(|(_, img)| img.clone()).collect();
    let mean = mean_image(&raw)?;
    let hist = pixel_histogram(&raw)?;
    let corr = pairwise_correlation(images)?;
    let corr_bins = correlation_histogram(&corr, CORRELATION_BINS)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if mean.channels == 3 {
        write_netpbm(&out_dir.join("mean_image.ppm"), &mean)?;
        write_netpbm(&out_dir.join("mean_image.pgm"), &to_grayscale(&mean)?)?;
    } else {
        write_netpbm(&out_dir.join("mean_image.pgm"), &mean)?;
    }
    if !masks.is_empty() {
        write_netpbm(&out_dir.join("mean_mask.pgm"), &mean_mask(masks)?)?;
    }
    let files = [
        ("pixel_hist.csv", format_pixel_histogram(&hist)),
        ("corr_hist.csv", format_correlation_histogram(&corr_bins)),
        ("corr_hist.svg", correlation_svg(&corr_bins)),
    ];
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
