//! Forward and backward kernels on plain tensors.
//!
//! Every reduction runs in a fixed order per output element, so results are
//! bitwise reproducible no matter how many worker threads split the outer
//! loops. Convolutions accumulate each output element over (input channel,
//! kernel row, kernel column) ascending and add the bias last.

use rand::Rng;
use rayon::prelude::*;

use super::array::{Shape, Tensor};
use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.var.len() != channels {
            return Err(Error::dim(
                "batchnorm2d running stats",
                &[self.mean.len(), self.var.len()],
                &[channels],
            ));
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Parameter(format!(
                "batch norm needs eps > 0 and momentum in (0, 1), got eps={} momentum={}",
                self.eps, self.momentum
            )));
        }
        Ok(())
    }
}

/// Affine parameters plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            stats: RunningStats::new(channels),
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, k: usize) -> Result<()> {
    if bias.dims() != [k] {
        return Err(Error::dim(op, bias.dims(), &[k]));
    }
    Ok(())
}

fn shape4(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(&[n, c, h, w]).expect("extents derived from a valid tensor")
}

fn span(len: usize, shift: isize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

/// `acc[y][x] += a * src[y + dy][x + dx]` wherever the source index is in range.
fn shifted_axpy<T: Scalar>(acc: &mut [T], src: &[T], a: T, h: usize, w: usize, dy: isize, dx: isize) {
    let xs = span(w, dx);
    for y in span(h, dy) {
        let sy = (y as isize + dy) as usize;
        let dst = &mut acc[y * w + xs.start..y * w + xs.end];
        let s0 = (sy * w) as isize + xs.start as isize + dx;
        let src_row = &src[s0 as usize..s0 as usize + xs.len()];
        for (d, &s) in dst.iter_mut().zip(src_row) {
            *d += a * s;
        }
    }
}

/// `sum a[y][x] * b[y + dy][x + dx]` over the in-range region.
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let xs = span(w, dx);
    let mut acc = T::zero();
    for y in span(h, dy) {
        let sy = (y as isize + dy) as usize;
        let s0 = ((sy * w) as isize + xs.start as isize + dx) as usize;
        let ar = &a[y * w + xs.start..y * w + xs.end];
        let br = &b[s0..s0 + xs.len()];
        acc += lane_dot(ar, br);
    }
    acc
}

/// Dot product over eight interleaved partial sums, combined in a fixed
/// order, so the result is reproducible and the loop vectorizes.
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut lanes = [T::zero(); L];
    let (ac, bc) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (pa, pb) in ac.zip(bc) {
        for i in 0..L {
            lanes[i] += pa[i] * pb[i];
        }
    }
    for (&p, &q) in ar.iter().zip(br) {
        lanes[0] += p * q;
    }
    let mut acc = T::zero();
    for v in lanes {
        acc += v;
    }
    acc
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, one pixel of zero padding

pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (k, wc, kh, kw) = w.dims4().map_err(|_| Error::dim("conv2d", x.dims(), w.dims()))?;
    if wc != c || kh != 3 || kw != 3 {
        return Err(Error::dim("conv2d", x.dims(), w.dims()));
    }
    check_bias("conv2d", b, k)?;
    let plane = h * wd;
    let (xd, wdata, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * k * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (ni, ki) = (idx / k, idx % k);
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * plane..][..plane];
            let wk = &wdata[(ki * c + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    shifted_axpy(acc, xp, wk[ky * 3 + kx], h, wd, ky as isize - 1, kx as isize - 1);
                }
            }
        }
        let bias = bd[ki];
        acc.iter_mut().for_each(|v| *v += bias);
    });
    Ok(Tensor::from_parts(shape4(n, k, h, wd), out))
}

/// Returns (d input, d weights, d bias).
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = x.dims4()?;
    let (k, _, _, _) = w.dims4()?;
    if gy.dims() != [n, k, h, wd] {
        return Err(Error::dim("conv2d backward", gy.dims(), &[n, k, h, wd]));
    }
    let plane = h * wd;
    let (xd, wdata, gyd) = (x.data(), w.data(), gy.data());

    let mut gx = vec![T::zero(); n * c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (ni, ci) = (idx / c, idx % c);
        for ki in 0..k {
            let gp = &gyd[(ni * k + ki) * plane..][..plane];
            let wk = &wdata[(ki * c + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    shifted_axpy(acc, gp, wk[ky * 3 + kx], h, wd, 1 - ky as isize, 1 - kx as isize);
                }
            }
        }
    });

    let mut gw = vec![T::zero(); k * c * 9];
    gw.par_chunks_mut(c * 9).enumerate().for_each(|(ki, gk)| {
        for ci in 0..c {
            for tap in 0..9 {
                let (dy, dx) = ((tap / 3) as isize - 1, (tap % 3) as isize - 1);
                let mut s = T::zero();
                for ni in 0..n {
                    let gp = &gyd[(ni * k + ki) * plane..][..plane];
                    let xp = &xd[(ni * c + ci) * plane..][..plane];
                    s += shifted_dot(gp, xp, h, wd, dy, dx);
                }
                gk[ci * 9 + tap] = s;
            }
        }
    });

    let gb = bias_grad(gyd, n, k, plane);
    Ok((
        Tensor::from_parts(x.shape().clone(), gx),
        Tensor::from_parts(w.shape().clone(), gw),
        gb,
    ))
}

fn bias_grad<T: Scalar>(gy: &[T], n: usize, k: usize, plane: usize) -> Tensor<T> {
    let gb = (0..k)
        .map(|ki| {
            let mut s = T::zero();
            for ni in 0..n {
                for &g in &gy[(ni * k + ki) * plane..][..plane] {
                    s += g;
                }
            }
            s
        })
        .collect();
    Tensor::from_parts(Shape::new(&[k]).expect("k >= 1"), gb)
}

// ---------------------------------------------------------------------------
// 1x1 convolution

pub fn conv1x1<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (k, wc, kh, kw) = w.dims4().map_err(|_| Error::dim("conv1x1", x.dims(), w.dims()))?;
    if wc != c || kh != 1 || kw != 1 {
        return Err(Error::dim("conv1x1", x.dims(), w.dims()));
    }
    check_bias("conv1x1", b, k)?;
    let plane = h * wd;
    let (xd, wdata, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * k * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (ni, ki) = (idx / k, idx % k);
        for ci in 0..c {
            let wv = wdata[ki * c + ci];
            for (a, &v) in acc.iter_mut().zip(&xd[(ni * c + ci) * plane..][..plane]) {
                *a += wv * v;
            }
        }
        let bias = bd[ki];
        acc.iter_mut().for_each(|v| *v += bias);
    });
    Ok(Tensor::from_parts(shape4(n, k, h, wd), out))
}

pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = x.dims4()?;
    let (k, _, _, _) = w.dims4()?;
    if gy.dims() != [n, k, h, wd] {
        return Err(Error::dim("conv1x1 backward", gy.dims(), &[n, k, h, wd]));
    }
    let plane = h * wd;
    let (xd, wdata, gyd) = (x.data(), w.data(), gy.data());
    let mut gx = vec![T::zero(); n * c * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let (ni, ci) = (idx / c, idx % c);
        for ki in 0..k {
            let wv = wdata[ki * c + ci];
            for (a, &g) in acc.iter_mut().zip(&gyd[(ni * k + ki) * plane..][..plane]) {
                *a += wv * g;
            }
        }
    });
    let mut gw = vec![T::zero(); k * c];
    gw.par_chunks_mut(c).enumerate().for_each(|(ki, gk)| {
        for (ci, slot) in gk.iter_mut().enumerate() {
            let mut s = T::zero();
            for ni in 0..n {
                let gp = &gyd[(ni * k + ki) * plane..][..plane];
                let xp = &xd[(ni * c + ci) * plane..][..plane];
                for (&g, &v) in gp.iter().zip(xp) {
                    s += g * v;
                }
            }
            *slot = s;
        }
    });
    let gb = bias_grad(gyd, n, k, plane);
    Ok((
        Tensor::from_parts(x.shape().clone(), gx),
        Tensor::from_parts(w.shape().clone(), gw),
        gb,
    ))
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 transposed convolution

pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4()?;
    let (wc, k, kh, kw) = w
        .dims4()
        .map_err(|_| Error::dim("conv_transpose2d", x.dims(), w.dims()))?;
    if wc != c || kh != 2 || kw != 2 {
        return Err(Error::dim("conv_transpose2d", x.dims(), w.dims()));
    }
    check_bias("conv_transpose2d", b, k)?;
    let (oh, ow) = (2 * h, 2 * wd);
    let (xd, wdata, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![T::zero(); n * k * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(idx, acc)| {
        let (ni, ki) = (idx / k, idx % k);
        for ci in 0..c {
            let xp = &xd[(ni * c + ci) * h * wd..][..h * wd];
            let wk = &wdata[(ci * k + ki) * 4..][..4];
            for i in 0..h {
                for j in 0..wd {
                    let v = xp[i * wd + j];
                    for a in 0..2 {
                        let row = (2 * i + a) * ow + 2 * j;
                        acc[row] += v * wk[a * 2];
                        acc[row + 1] += v * wk[a * 2 + 1];
                    }
                }
            }
        }
        let bias = bd[ki];
        acc.iter_mut().for_each(|v| *v += bias);
    });
    Ok(Tensor::from_parts(shape4(n, k, oh, ow), out))
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = x.dims4()?;
    let (_, k, _, _) = w.dims4()?;
    let (oh, ow) = (2 * h, 2 * wd);
    if gy.dims() != [n, k, oh, ow] {
        return Err(Error::dim("conv_transpose2d backward", gy.dims(), &[n, k, oh, ow]));
    }
    let (xd, wdata, gyd) = (x.data(), w.data(), gy.data());
    let oplane = oh * ow;

    // Gradient w.r.t. the input is a stride-2 2x2 convolution of gy.
    let mut gx = vec![T::zero(); n * c * h * wd];
    gx.par_chunks_mut(h * wd).enumerate().for_each(|(idx, acc)| {
        let (ni, ci) = (idx / c, idx % c);
        for ki in 0..k {
            let gp = &gyd[(ni * k + ki) * oplane..][..oplane];
            let wk = &wdata[(ci * k + ki) * 4..][..4];
            for i in 0..h {
                for j in 0..wd {
                    let r0 = 2 * i * ow + 2 * j;
                    let r1 = r0 + ow;
                    acc[i * wd + j] +=
                        gp[r0] * wk[0] + gp[r0 + 1] * wk[1] + gp[r1] * wk[2] + gp[r1 + 1] * wk[3];
                }
            }
        }
    });

    let mut gw = vec![T::zero(); c * k * 4];
    gw.par_chunks_mut(k * 4).enumerate().for_each(|(ci, gc)| {
        for ki in 0..k {
            for tap in 0..4 {
                let (a, bb) = (tap / 2, tap % 2);
                let mut s = T::zero();
                for ni in 0..n {
                    let gp = &gyd[(ni * k + ki) * oplane..][..oplane];
                    let xp = &xd[(ni * c + ci) * h * wd..][..h * wd];
                    for i in 0..h {
                        for j in 0..wd {
                            s += xp[i * wd + j] * gp[(2 * i + a) * ow + 2 * j + bb];
                        }
                    }
                }
                gc[ki * 4 + tap] = s;
            }
        }
    });

    let gb = bias_grad(gyd, n, k, oplane);
    Ok((
        Tensor::from_parts(x.shape().clone(), gx),
        Tensor::from_parts(w.shape().clone(), gw),
        gb,
    ))
}

// ---------------------------------------------------------------------------
// 2x2 max pooling

/// Returns the pooled tensor and, per output element, the flat input index
/// that won. Ties go to the first element in row-major order.
pub fn maxpool2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2x2 needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (o, a))| {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for cand in [
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    o[i * ow + j] = xd[best];
                    a[i * ow + j] = best;
                }
            }
        });
    Ok((Tensor::from_parts(shape4(n, c, oh, ow), out), arg))
}

pub fn maxpool2x2_backward<T: Scalar>(input_shape: &Shape, argmax: &[usize], gy: &[T]) -> Tensor<T> {
    let mut gx = vec![T::zero(); input_shape.numel()];
    for (&src, &g) in argmax.iter().zip(gy) {
        gx[src] += g;
    }
    Tensor::from_parts(input_shape.clone(), gx)
}

// ---------------------------------------------------------------------------
// channel concatenation

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c1, h, w) = a.dims4()?;
    let (n2, c2, h2, w2) = b.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::dim("concat_channels", a.dims(), b.dims()));
    }
    let (pa, pb) = (c1 * h * w, c2 * h * w);
    let mut out = Vec::with_capacity(n * (pa + pb));
    for ni in 0..n {
        out.extend_from_slice(&a.data()[ni * pa..][..pa]);
        out.extend_from_slice(&b.data()[ni * pb..][..pb]);
    }
    Ok(Tensor::from_parts(shape4(n, c1 + c2, h, w), out))
}

/// Splits an output gradient back into the gradients of the two inputs.
pub fn concat_channels_backward<T: Scalar>(
    a_shape: &Shape,
    b_shape: &Shape,
    gy: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let d = a_shape.dims();
    let n = d[0];
    let pa = a_shape.numel() / n;
    let pb = b_shape.numel() / n;
    let mut ga = Vec::with_capacity(a_shape.numel());
    let mut gb = Vec::with_capacity(b_shape.numel());
    for ni in 0..n {
        let row = &gy[ni * (pa + pb)..][..pa + pb];
        ga.extend_from_slice(&row[..pa]);
        gb.extend_from_slice(&row[pa..]);
    }
    (
        Tensor::from_parts(a_shape.clone(), ga),
        Tensor::from_parts(b_shape.clone(), gb),
    )
}

// ---------------------------------------------------------------------------
// pointwise

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &[T], gy: &[T]) -> Vec<T> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, sigmoid_scalar)
}

/// Gradient from the sigmoid's own output `s`.
pub fn sigmoid_backward<T: Scalar>(s: &[T], gy: &[T]) -> Vec<T> {
    s.iter()
        .zip(gy)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
    Tensor::from_parts(x.shape().clone(), x.data().iter().map(|&v| f(v)).collect())
}

// ---------------------------------------------------------------------------
// batch normalization

/// Saved values a train-mode batch norm needs for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
}

fn channel_slices(n: usize, c: usize, plane: usize, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).map(move |ni| (ni * c + ch) * plane..(ni * c + ch + 1) * plane)
}

fn check_affine<T: Scalar>(gamma: &[T], beta: &[T], c: usize) -> Result<()> {
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("batchnorm2d affine", &[gamma.len(), beta.len()], &[c]));
    }
    Ok(())
}

/// Train-mode batch norm: normalizes with the biased batch statistics over
/// (N, H, W) and folds them into `stats`.
pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(gamma, beta, c)?;
    stats.check(c)?;
    let plane = h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::DegenerateBatch(m));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0;
        for r in channel_slices(n, c, plane, ch) {
            sum += xd[r].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut sq = 0.0;
        for r in channel_slices(n, c, plane, ch) {
            sq += xd[r].iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / m as f64;
        let is = 1.0 / (var + stats.eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma[ch].as_f64(), beta[ch].as_f64());
        for r in channel_slices(n, c, plane, ch) {
            for i in r {
                let xh = (xd[i].as_f64() - mean) * is;
                xhat[i] = T::lit(xh);
                y[i] = T::lit(g * xh + b);
            }
        }
        let mo = stats.momentum;
        stats.mean[ch] = T::lit((1.0 - mo) * stats.mean[ch].as_f64() + mo * mean);
        stats.var[ch] = T::lit((1.0 - mo) * stats.var[ch].as_f64() + mo * var);
    }
    Ok((
        Tensor::from_parts(x.shape().clone(), y),
        BatchNormCache { xhat, inv_std },
    ))
}

/// Eval-mode batch norm using the running statistics; also returns the
/// per-channel inverse standard deviation for the backward pass.
pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    check_affine(gamma, beta, c)?;
    stats.check(c)?;
    let plane = h * w;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let mean = stats.mean[ch].as_f64();
        let is = 1.0 / (stats.var[ch].as_f64() + stats.eps).sqrt();
        inv_std[ch] = is;
        let (g, b) = (gamma[ch].as_f64(), beta[ch].as_f64());
        for r in channel_slices(n, c, plane, ch) {
            for i in r {
                let xh = (xd[i].as_f64() - mean) * is;
                xhat[i] = T::lit(xh);
                y[i] = T::lit(g * xh + b);
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().clone(), y),
        BatchNormCache { xhat, inv_std },
    ))
}

/// Convenience wrapper over the train/eval kernels for callers holding a
/// full [`BatchNormState`].
pub fn batchnorm2d<T: Scalar>(x: &Tensor<T>, state: &mut BatchNormState<T>, mode: Mode) -> Result<Tensor<T>> {
    let out = match mode {
        Mode::Train => batchnorm2d_train(x, &state.gamma, &state.beta, &mut state.stats)?,
        Mode::Eval => batchnorm2d_eval(x, &state.gamma, &state.beta, &state.stats)?,
    };
    Ok(out.0)
}

/// Returns (d input, d gamma, d beta). In train mode the input gradient
/// includes the dependency of the batch mean and variance on every input.
pub fn batchnorm2d_backward<T: Scalar>(
    shape: &Shape,
    gamma: &[T],
    cache: &BatchNormCache<T>,
    gy: &[T],
    mode: Mode,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let d = shape.dims();
    let (n, c, plane) = (d[0], d[1], d[2] * d[3]);
    let m = (n * plane) as f64;
    let mut gx = vec![T::zero(); gy.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for r in channel_slices(n, c, plane, ch) {
            for i in r {
                let g = gy[i].as_f64();
                sum_g += g;
                sum_gx += g * cache.xhat[i].as_f64();
            }
        }
        ggamma[ch] = T::lit(sum_gx);
        gbeta[ch] = T::lit(sum_g);
        let gm = gamma[ch].as_f64();
        let is = cache.inv_std[ch];
        for r in channel_slices(n, c, plane, ch) {
            for i in r {
                let g = gy[i].as_f64();
                gx[i] = T::lit(match mode {
                    Mode::Train => {
                        gm * is / m * (m * g - sum_g - cache.xhat[i].as_f64() * sum_gx)
                    }
                    Mode::Eval => gm * is * g,
                });
            }
        }
    }
    (Tensor::from_parts(shape.clone(), gx), ggamma, gbeta)
}

// ---------------------------------------------------------------------------
// channel dropout

/// Draws one scale factor per (sample, channel): `0` with probability `p`,
/// otherwise `1 / (1 - p)`. Eval mode and `p == 0` draw nothing.
pub fn dropout2d_scales<T: Scalar, R: Rng + ?Sized>(
    n: usize,
    c: usize,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(vec![T::one(); n * c]);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    Ok((0..n * c)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect())
}

pub fn apply_channel_scales<T: Scalar>(x: &[T], scales: &[T], plane: usize) -> Vec<T> {
    x.chunks(plane)
        .zip(scales)
        .flat_map(|(ch, &s)| ch.iter().map(move |&v| v * s))
        .collect()
}

pub fn dropout2d<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let scales = dropout2d_scales(n, c, p, mode, rng)?;
    Ok(Tensor::from_parts(
        x.shape().clone(),
        apply_channel_scales(x.data(), &scales, h * w),
    ))
}

// ---------------------------------------------------------------------------
// segmentation losses on probabilities

fn check_same<T: Scalar>(op: &'static str, y: &Tensor<T>, yhat: &Tensor<T>) -> Result<()> {
    if y.dims() != yhat.dims() {
        return Err(Error::dim(op, y.dims(), yhat.dims()));
    }
    Ok(())
}

/// Mean binary cross entropy with predictions clamped to `[clamp, 1 - clamp]`.
pub fn bce<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, clamp: f64) -> Result<f64> {
    check_same("bce_loss", y, yhat)?;
    let n = y.numel() as f64;
    let total: f64 = y
        .data()
        .iter()
        .zip(yhat.data())
        .map(|(&t, &p)| {
            let (t, p) = (t.as_f64(), p.as_f64().clamp(clamp, 1.0 - clamp));
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

pub fn bce_grad<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, clamp: f64) -> Vec<f64> {
    let n = y.numel() as f64;
    y.data()
        .iter()
        .zip(yhat.data())
        .map(|(&t, &p)| {
            let (t, p) = (t.as_f64(), p.as_f64());
            if p < clamp || p > 1.0 - clamp {
                0.0
            } else {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            }
        })
        .collect()
}

/// `1 - 2 sum(y yhat) / (sum(y) + sum(yhat) + eps)` pooled over every element.
pub fn dice<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, eps: f64) -> Result<f64> {
    check_same("dice_loss", y, yhat)?;
    let (inter, denom) = dice_sums(y, yhat, eps);
    Ok(1.0 - 2.0 * inter / denom)
}

fn dice_sums<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, eps: f64) -> (f64, f64) {
    let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for (&t, &p) in y.data().iter().zip(yhat.data()) {
        let (t, p) = (t.as_f64(), p.as_f64());
        inter += t * p;
        sy += t;
        sp += p;
    }
    (inter, sy + sp + eps)
}

pub fn dice_grad<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, eps: f64) -> Vec<f64> {
    let (inter, denom) = dice_sums(y, yhat, eps);
    y.data()
        .iter()
        .map(|&t| -2.0 * (t.as_f64() * denom - inter) / (denom * denom))
        .collect()
}
