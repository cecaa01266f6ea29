#![allow(dead_code)]

//! Independent naive-loop references shared by the test targets.

pub mod clahe_reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0f32..1.0)).unwrap()
}

pub fn random_tensor64(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0f64..1.0)).unwrap()
}

fn idx(d: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * d[1] + c) * d[2] + y) * d[3] + x
}

/// Zero-padded 3x3 cross-correlation, accumulated over (c, m, n), bias last.
pub fn conv2d_naive(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32]) -> Vec<f32> {
    let xd = x.dims();
    let wd = w.dims();
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let k = wd[0];
    let mut out = vec![0.0; n * k * h * wi];
    for ni in 0..n {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..wi {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        for m in -1i64..=1 {
                            for nn in -1i64..=1 {
                                let (yy, xx) = (i as i64 + m, j as i64 + nn);
                                let v = if yy < 0 || xx < 0 || yy >= h as i64 || xx >= wi as i64 {
                                    0.0
                                } else {
                                    x.data()[idx(xd, ni, ci, yy as usize, xx as usize)]
                                };
                                acc += v * w.data()[idx(wd, ki, ci, (m + 1) as usize, (nn + 1) as usize)];
                            }
                        }
                    }
                    out[idx(&[n, k, h, wi], ni, ki, i, j)] = acc + b[ki];
                }
            }
        }
    }
    out
}

/// Stride-2 scatter through a (C, K, 2, 2) kernel.
pub fn conv_transpose2d_naive(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32]) -> Vec<f32> {
    let xd = x.dims();
    let wd = w.dims();
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let k = wd[1];
    let od = [n, k, 2 * h, 2 * wi];
    let mut out = vec![0.0; n * k * 4 * h * wi];
    for ni in 0..n {
        for ki in 0..k {
            for oy in 0..2 * h {
                for ox in 0..2 * wi {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        acc += x.data()[idx(xd, ni, ci, oy / 2, ox / 2)]
                            * w.data()[idx(wd, ci, ki, oy % 2, ox % 2)];
                    }
                    out[idx(&od, ni, ki, oy, ox)] = acc + b[ki];
                }
            }
        }
    }
    out
}

pub fn conv1x1_naive(x: &Tensor<f32>, w: &Tensor<f32>, b: &[f32]) -> Vec<f32> {
    let xd = x.dims();
    let (n, c, h, wi) = (xd[0], xd[1], xd[2], xd[3]);
    let k = w.dims()[0];
    let mut out = vec![0.0; n * k * h * wi];
    for ni in 0..n {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..wi {
                    let mut acc = 0.0f32;
                    for ci in 0..c {
                        acc += x.data()[idx(xd, ni, ci, i, j)] * w.data()[ki * c + ci];
                    }
                    out[idx(&[n, k, h, wi], ni, ki, i, j)] = acc + b[ki];
                }
            }
        }
    }
    out
}

/// Block scan; returns values and winning flat indices (first maximum wins).
pub fn maxpool_naive(x: &Tensor<f32>) -> (Vec<f32>, Vec<usize>) {
    let d = x.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let mut vals = Vec::new();
    let mut arg = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let mut best: Option<(f32, usize)> = None;
                    for a in 0..2 {
                        for bb in 0..2 {
                            let p = idx(d, ni, ci, 2 * i + a, 2 * j + bb);
                            let v = x.data()[p];
                            if best.is_none_or(|(bv, _)| v > bv) {
                                best = Some((v, p));
                            }
                        }
                    }
                    let (v, p) = best.unwrap();
                    vals.push(v);
                    arg.push(p);
                }
            }
        }
    }
    (vals, arg)
}
