use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, GrayImage, ImageU8};
use crate::error::{Error, Result};

/// BT.601 luma, rounded half away from zero.
pub fn to_grayscale(img: &ImageU8) -> Result<ImageU8> {
    if img.channels != 3 {
        return Err(Error::Parameter("image is already single-channel".into()));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    ImageU8::gray(img.width, img.height, data)
}

/// `v / 255` per pixel.
pub fn normalize(img: &ImageU8) -> Result<GrayImage> {
    if img.channels != 1 {
        return Err(Error::Parameter("normalize expects a single-channel image".into()));
    }
    GrayImage::new(img.width, img.height, img.data.iter().map(|&v| f32::from(v) / 255.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheConfig {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Clip limit as a multiple of the uniform bin height.
    pub clip_factor: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            tiles_x: 8,
            tiles_y: 8,
            clip_factor: 2.0,
        }
    }
}

impl ClaheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::Parameter("CLAHE needs at least one tile per axis".into()));
        }
        if !(self.clip_factor >= 1.0) {
            return Err(Error::Parameter(format!("clip_factor {} must be at least 1", self.clip_factor)));
        }
        Ok(())
    }
}

pub const CLAHE_BINS: usize = 256;

/// Half-open pixel ranges of `tiles` tiles over `len`; the last tile
/// absorbs the remainder.
pub fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    let step = len / tiles;
    (0..tiles)
        .map(|i| (i * step, if i + 1 == tiles { len } else { (i + 1) * step }))
        .collect()
}

/// Clip limit for a tile of `tile_pixels` pixels.
pub fn clip_limit(clip_factor: f64, tile_pixels: usize) -> u64 {
    ((clip_factor * tile_pixels as f64 / CLAHE_BINS as f64).floor() as u64).max(1)
}

/// Clips at `limit` and spreads the excess evenly, remainder one per bin from bin 0.
pub fn clip_histogram(hist: &mut [u64; CLAHE_BINS], limit: u64) {
    let mut excess = 0;
    for h in hist.iter_mut() {
        if *h > limit {
            excess += *h - limit;
            *h = limit;
        }
    }
    let per = excess / CLAHE_BINS as u64;
    let rem = (excess % CLAHE_BINS as u64) as usize;
    for (b, h) in hist.iter_mut().enumerate() {
        *h += per + u64::from(b < rem);
    }
}

/// `round(255 cdf(v) / total)` for every level `v`.
pub fn equalization_map(hist: &[u64; CLAHE_BINS]) -> [u8; CLAHE_BINS] {
    let total: u64 = hist.iter().sum();
    let mut map = [0u8; CLAHE_BINS];
    let mut cdf = 0u64;
    for (m, &h) in map.iter_mut().zip(hist) {
        cdf += h;
        *m = ((2 * 255 * cdf + total) / (2 * total)) as u8;
    }
    map
}

fn validate_clahe(img: &ImageU8, cfg: &ClaheConfig) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Parameter("CLAHE expects a single-channel image".into()));
    }
    cfg.validate()?;
    if img.width < cfg.tiles_x || img.height < cfg.tiles_y {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the {}x{} tile grid",
            img.width, img.height, cfg.tiles_x, cfg.tiles_y
        )));
    }
    Ok(())
}

/// Per-tile mappings in row-major tile order.
pub fn clahe_tile_maps(img: &ImageU8, cfg: &ClaheConfig) -> Result<Vec<[u8; CLAHE_BINS]>> {
    validate_clahe(img, cfg)?;
    let xs = tile_bounds(img.width, cfg.tiles_x);
    let ys = tile_bounds(img.height, cfg.tiles_y);
    Ok(ys
        .iter()
        .flat_map(|&(y0, y1)| xs.iter().map(move |&(x0, x1)| (x0, x1, y0, y1)))
        .map(|(x0, x1, y0, y1)| {
            let mut hist = [0u64; CLAHE_BINS];
            for y in y0..y1 {
                for &v in &img.data[y * img.width + x0..y * img.width + x1] {
                    hist[v as usize] += 1;
                }
            }
            clip_histogram(&mut hist, clip_limit(cfg.clip_factor, (x1 - x0) * (y1 - y0)));
            equalization_map(&hist)
        })
        .collect())
}

/// For each pixel coordinate: the lower tile index and the weight of the
/// upper one, interpolating between tile centers and clamping at borders.
fn interpolation_axis(len: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = tile_bounds(len, tiles)
        .iter()
        .map(|&(a, b)| (a + b - 1) as f64 / 2.0)
        .collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let i = centers.iter().rposition(|&c| c <= p).expect("p above first center");
            (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization.
pub fn clahe(img: &ImageU8, cfg: &ClaheConfig) -> Result<ImageU8> {
    let maps = clahe_tile_maps(img, cfg)?;
    let ax = interpolation_axis(img.width, cfg.tiles_x);
    let ay = interpolation_axis(img.height, cfg.tiles_y);
    let tx = cfg.tiles_x;
    let mut out = vec![0u8; img.data.len()];
    out.par_chunks_mut(img.width).enumerate().for_each(|(y, row)| {
        let (j0, j1, wy) = ay[y];
        for (x, o) in row.iter_mut().enumerate() {
            let (i0, i1, wx) = ax[x];
            let v = img.data[y * img.width + x] as usize;
            let m = |j: usize, i: usize| f64::from(maps[j * tx + i][v]);
            let top = (1.0 - wx) * m(j0, i0) + wx * m(j0, i1);
            let bottom = (1.0 - wx) * m(j1, i0) + wx * m(j1, i1);
            *o = ((1.0 - wy) * top + wy * bottom).round().clamp(0.0, 255.0) as u8;
        }
    });
    ImageU8::gray(img.width, img.height, out)
}

/// Maps an output coordinate to its half-pixel-centered source coordinate.
fn source_coord(p: usize, in_len: usize, out_len: usize) -> f64 {
    (p as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

pub fn resize_image(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_w}x{out_h}")));
    }
    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|p| {
                let s = source_coord(p, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(in_len - 1), s - lo as f64)
            })
            .collect()
    };
    let ax = axis(out_w, img.width);
    let ay = axis(out_h, img.height);
    let mut out = vec![0f32; out_w * out_h];
    out.par_chunks_mut(out_w).enumerate().for_each(|(y, row)| {
        let (y0, y1, fy) = ay[y];
        for (x, o) in row.iter_mut().enumerate() {
            let (x0, x1, fx) = ax[x];
            let p = |xx: usize, yy: usize| f64::from(img.data[yy * img.width + xx]);
            let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
            let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
            *o = ((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0) as f32;
        }
    });
    GrayImage::new(out_w, out_h, out)
}

pub fn resize_mask(mask: &BinaryMask, out_w: usize, out_h: usize) -> Result<BinaryMask> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_w}x{out_h}")));
    }
    let nearest = |p: usize, in_len: usize, out_len: usize| ((p * 2 + 1) * in_len / (2 * out_len)).min(in_len - 1);
    let data = (0..out_h)
        .flat_map(|y| {
            let sy = nearest(y, mask.height, out_h);
            (0..out_w).map(move |x| mask.data[sy * mask.width + nearest(x, mask.width, out_w)])
        })
        .collect();
    BinaryMask::new(out_w, out_h, data)
}

/// A single-channel raster that flips and rotates without changing type.
pub trait Raster: Sized {
    type Px: Copy + Default + Send + Sync;
    fn dims(&self) -> (usize, usize);
    fn pixels(&self) -> &[Self::Px];
    fn from_pixels(width: usize, height: usize, data: Vec<Self::Px>) -> Result<Self>;
}

impl Raster for GrayImage {
    type Px = f32;
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn pixels(&self) -> &[f32] {
        &self.data
    }
    fn from_pixels(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        GrayImage::new(width, height, data)
    }
}

impl Raster for BinaryMask {
    type Px = u8;
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    fn pixels(&self) -> &[u8] {
        &self.data
    }
    fn from_pixels(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        BinaryMask::new(width, height, data)
    }
}

/// Reverses every row.
pub fn hflip<R: Raster>(r: &R) -> R {
    let (w, h) = r.dims();
    let data = r.pixels().chunks_exact(w).flat_map(|row| row.iter().rev().copied()).collect();
    R::from_pixels(w, h, data).expect("same dimensions")
}

/// Reverses the row order.
pub fn vflip<R: Raster>(r: &R) -> R {
    let (w, h) = r.dims();
    let data = r.pixels().chunks_exact(w).rev().flatten().copied().collect();
    R::from_pixels(w, h, data).expect("same dimensions")
}

const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Where pixel `(x, y)` lands after rotating a `width x height` raster by
/// `degrees` counterclockwise (as displayed, y down) about its center.
pub fn rotate_point(x: f64, y: f64, width: usize, height: usize, degrees: f64) -> (f64, f64) {
    let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    (snap(cx + c * dx + s * dy), snap(cy - s * dx + c * dy))
}

/// Source coordinate sampled for output pixel `(x, y)`.
fn rotate_source(x: usize, y: usize, width: usize, height: usize, degrees: f64) -> (f64, f64) {
    rotate_point(x as f64, y as f64, width, height, -degrees)
}

fn inside(v: f64, len: usize) -> bool {
    v >= 0.0 && v <= (len - 1) as f64
}

/// Rotates an image (bilinear) and its mask (nearest) with identical
/// geometry; pixels sourced from outside the frame become 0.
pub fn rotate(img: &GrayImage, mask: &BinaryMask, degrees: f64) -> Result<(GrayImage, BinaryMask)> {
    if !(degrees.abs() <= 180.0) {
        return Err(Error::Parameter(format!("rotation angle {degrees} outside [-180, 180]")));
    }
    if img.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "image {:?} and mask {:?} differ in size",
            img.dims(),
            mask.dims()
        )));
    }
    let (w, h) = img.dims();
    let mut out = vec![0f32; w * h];
    let mut out_mask = vec![0u8; w * h];
    out.par_chunks_mut(w)
        .zip(out_mask.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, mrow))| {
            for x in 0..w {
                let (sx, sy) = rotate_source(x, y, w, h, degrees);
                if !(inside(sx, w) && inside(sy, h)) {
                    continue;
                }
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                let p = |xx: usize, yy: usize| f64::from(img.data[yy * w + xx]);
                let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
                let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
                row[x] = ((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0) as f32;
                let (nx, ny) = (sx.round() as usize, sy.round() as usize);
                mrow[x] = mask.data[ny * w + nx];
            }
        });
    Ok((GrayImage::new(w, h, out)?, BinaryMask::new(w, h, out_mask)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clahe: Option<ClaheConfig>,
    /// Output width and height; `None` keeps the native size.
    pub size: Option<(usize, usize)>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe: Some(ClaheConfig::default()),
            size: Some((512, 512)),
        }
    }
}

/// grayscale -> CLAHE (8-bit) -> normalize -> resize.
pub fn preprocess_image(img: &ImageU8, cfg: &PreprocessConfig) -> Result<GrayImage> {
    let gray = if img.channels == 3 { to_grayscale(img)? } else { img.clone() };
    let gray = match &cfg.clahe {
        Some(c) => clahe(&gray, c)?,
        None => gray,
    };
    let norm = normalize(&gray)?;
    match cfg.size {
        Some((w, h)) if (w, h) != (norm.width, norm.height) => resize_image(&norm, w, h),
        _ => Ok(norm),
    }
}

/// Resizes a mask alongside [`preprocess_image`].
pub fn preprocess_mask(mask: &BinaryMask, cfg: &PreprocessConfig) -> Result<BinaryMask> {
    match cfg.size {
        Some((w, h)) if (w, h) != (mask.width, mask.height) => resize_mask(mask, w, h),
        _ => Ok(mask.clone()),
    }
}
