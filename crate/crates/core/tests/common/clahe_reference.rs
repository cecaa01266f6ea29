//! Straight-line CLAHE written from the definition: every pixel looks up
//! its surrounding tiles and recomputes their mappings from scratch.

#![allow(clippy::needless_range_loop)]

use vesselseg::imaging::ImageU8;

fn bounds(len: usize, tiles: usize, i: usize) -> (usize, usize) {
    let step = len / tiles;
    let start = i * step;
    let end = if i == tiles - 1 { len } else { start + step };
    (start, end)
}

pub fn tile_map(img: &ImageU8, tiles_x: usize, tiles_y: usize, tx: usize, ty: usize, clip: Option<f64>) -> Vec<u8> {
    let (x0, x1) = bounds(img.width, tiles_x, tx);
    let (y0, y1) = bounds(img.height, tiles_y, ty);
    let pixels = (x1 - x0) * (y1 - y0);
    let mut hist = vec![0u64; 256];
    for y in y0..y1 {
        for x in x0..x1 {
            hist[img.data[y * img.width + x] as usize] += 1;
        }
    }
    if let Some(cf) = clip {
        let mut limit = (cf * pixels as f64 / 256.0).floor() as u64;
        if limit < 1 {
            limit = 1;
        }
        let mut excess = 0;
        for b in 0..256 {
            if hist[b] > limit {
                excess += hist[b] - limit;
                hist[b] = limit;
            }
        }
        for b in 0..256 {
            hist[b] += excess / 256;
        }
        for b in 0..(excess % 256) as usize {
            hist[b] += 1;
        }
    }
    let mut map = vec![0u8; 256];
    for v in 0..256 {
        let cdf: u64 = hist[..=v].iter().sum();
        map[v] = (255.0 * cdf as f64 / pixels as f64).round() as u8;
    }
    map
}

fn center(len: usize, tiles: usize, i: usize) -> f64 {
    let (a, b) = bounds(len, tiles, i);
    (a as f64 + (b - 1) as f64) / 2.0
}

fn locate(p: usize, len: usize, tiles: usize) -> (usize, usize, f64) {
    let p = p as f64;
    if p <= center(len, tiles, 0) {
        return (0, 0, 0.0);
    }
    if p >= center(len, tiles, tiles - 1) {
        return (tiles - 1, tiles - 1, 0.0);
    }
    let mut i = 0;
    while center(len, tiles, i + 1) <= p {
        i += 1;
    }
    let (c0, c1) = (center(len, tiles, i), center(len, tiles, i + 1));
    (i, i + 1, (p - c0) / (c1 - c0))
}

pub fn equalize(img: &ImageU8, tiles_x: usize, tiles_y: usize, clip: Option<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.data[y * img.width + x] as usize;
            let (i0, i1, wx) = locate(x, img.width, tiles_x);
            let (j0, j1, wy) = locate(y, img.height, tiles_y);
            let m = |i: usize, j: usize| tile_map(img, tiles_x, tiles_y, i, j, clip)[v] as f64;
            let top = (1.0 - wx) * m(i0, j0) + wx * m(i1, j0);
            let bottom = (1.0 - wx) * m(i0, j1) + wx * m(i1, j1);
            out.push(((1.0 - wy) * top + wy * bottom).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}
