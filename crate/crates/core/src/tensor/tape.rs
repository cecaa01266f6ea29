use rand::Rng;

use super::array::{Shape, Tensor};
use super::kernels::{self, BatchNormCache, RunningStats};
use super::Mode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    Conv1x1 { x: Var, w: Var, b: Var },
    ConvTranspose2d { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BatchNormCache<T>, mode: Mode },
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat { a: Var, b: Var },
    Dropout { x: Var, scales: Vec<T> },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
    Add { a: Var, b: Var },
    Bce { yhat: Var, target: Tensor<T>, clamp: f64 },
    Dice { yhat: Var, target: Tensor<T>, eps: f64 },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of a computation. Inputs always precede the nodes
/// that consume them, so the lineage is acyclic and the reverse index order
/// is a valid topological order for [`Tape::backward`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input (parameter or probe point).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`backward`](Self::backward) target w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        let node = &mut self.nodes[v.0];
        node.grad
            .take()
            .map(|g| Tensor::from_parts(node.value.shape().clone(), g))
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv1x1(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv1x1 { x, w, b }, &[x, w, b]))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::conv_transpose2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::ConvTranspose2d { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = kernels::relu(self.value(x));
        self.push(y, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = kernels::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x }, &[x])
    }

    /// Batch norm with learnable `gamma`/`beta` (shape `[C]`). Train mode
    /// normalizes with batch statistics and updates `stats`; eval mode reads
    /// `stats` only.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let (y, cache) = match mode {
            Mode::Train => kernels::batchnorm2d_train(self.value(x), g, b, stats)?,
            Mode::Eval => kernels::batchnorm2d_eval(self.value(x), g, b, stats)?,
        };
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                mode,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool2x2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }, &[a, b]))
    }

    pub fn dropout2d<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let scales = kernels::dropout2d_scales(n, c, p, mode, rng)?;
        let data = kernels::apply_channel_scales(self.value(x).data(), &scales, h * w);
        let y = Tensor::from_parts(self.value(x).shape().clone(), data);
        Ok(self.push(y, Op::Dropout { x, scales }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    /// `sum(x * weights)` against fixed weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.dims() != weights.dims() {
            return Err(Error::dim("weighted_sum", vx.dims(), weights.dims()));
        }
        let s: T = vx.data().iter().zip(weights.data()).map(|(&p, &q)| p * q).sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.clone(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::dim("add", va.dims(), vb.dims()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let y = Tensor::from_parts(va.shape().clone(), data);
        Ok(self.push(y, Op::Add { a, b }, &[a, b]))
    }

    /// Mean clamped binary cross entropy of `yhat` against a fixed target.
    pub fn bce(&mut self, yhat: Var, target: &Tensor<T>, clamp: f64) -> Result<Var> {
        let v = kernels::bce(target, self.value(yhat), clamp)?;
        let op = Op::Bce {
            yhat,
            target: target.clone(),
            clamp,
        };
        Ok(self.push(Tensor::scalar(T::lit(v)), op, &[yhat]))
    }

    /// Pooled Dice loss of `yhat` against a fixed target.
    pub fn dice(&mut self, yhat: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let v = kernels::dice(target, self.value(yhat), eps)?;
        let op = Op::Dice {
            yhat,
            target: target.clone(),
            eps,
        };
        Ok(self.push(Tensor::scalar(T::lit(v)), op, &[yhat]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients on every
    /// ancestor that requires one. Gradients from earlier sweeps are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(gy) = node.grad.as_deref() else {
                continue;
            };
            for (input, g) in input_grads(before, node, gy)? {
                let target = &mut before[input.0];
                if !target.requires_grad {
                    continue;
                }
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn val<T>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

fn input_grads<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, gy: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
    let out_shape = node.value.shape();
    let gyt = || Tensor::from_parts(out_shape.clone(), gy.to_vec());
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { x, w, b } => {
            let (gx, gw, gb) = kernels::conv2d_backward(val(nodes, *x), val(nodes, *w), &gyt())?;
            vec![(*x, gx.into_data()), (*w, gw.into_data()), (*b, gb.into_data())]
        }
        Op::Conv1x1 { x, w, b } => {
            let (gx, gw, gb) = kernels::conv1x1_backward(val(nodes, *x), val(nodes, *w), &gyt())?;
            vec![(*x, gx.into_data()), (*w, gw.into_data()), (*b, gb.into_data())]
        }
        Op::ConvTranspose2d { x, w, b } => {
            let (gx, gw, gb) =
                kernels::conv_transpose2d_backward(val(nodes, *x), val(nodes, *w), &gyt())?;
            vec![(*x, gx.into_data()), (*w, gw.into_data()), (*b, gb.into_data())]
        }
        Op::Relu { x } => vec![(*x, kernels::relu_backward(val(nodes, *x).data(), gy))],
        Op::Sigmoid { x } => vec![(*x, kernels::sigmoid_backward(node.value.data(), gy))],
        Op::BatchNorm {
            x,
            gamma,
            beta,
            cache,
            mode,
        } => {
            let (gx, gg, gb) = kernels::batchnorm2d_backward(
                val(nodes, *x).shape(),
                val(nodes, *gamma).data(),
                cache,
                gy,
                *mode,
            );
            vec![(*x, gx.into_data()), (*gamma, gg), (*beta, gb)]
        }
        Op::MaxPool { x, argmax } => {
            let gx = kernels::maxpool2x2_backward(val(nodes, *x).shape(), argmax, gy);
            vec![(*x, gx.into_data())]
        }
        Op::Concat { a, b } => {
            let (ga, gb) = kernels::concat_channels_backward(
                val(nodes, *a).shape(),
                val(nodes, *b).shape(),
                gy,
            );
            vec![(*a, ga.into_data()), (*b, gb.into_data())]
        }
        Op::Dropout { x, scales } => {
            let plane = plane_of(out_shape);
            vec![(*x, kernels::apply_channel_scales(gy, scales, plane))]
        }
        Op::Sum { x } => vec![(*x, vec![gy[0]; val(nodes, *x).numel()])],
        Op::WeightedSum { x, weights } => {
            vec![(*x, weights.data().iter().map(|&w| w * gy[0]).collect())]
        }
        Op::Add { a, b } => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
        Op::Bce {
            yhat,
            target,
            clamp,
        } => {
            let g = kernels::bce_grad(target, val(nodes, *yhat), *clamp);
            vec![(*yhat, scale_f64(&g, gy[0]))]
        }
        Op::Dice { yhat, target, eps } => {
            let g = kernels::dice_grad(target, val(nodes, *yhat), *eps);
            vec![(*yhat, scale_f64(&g, gy[0]))]
        }
    })
}

fn plane_of(shape: &Shape) -> usize {
    let d = shape.dims();
    d[2] * d[3]
}

fn scale_f64<T: Scalar>(g: &[f64], s: T) -> Vec<T> {
    let s = s.as_f64();
    g.iter().map(|&v| T::lit(v * s)).collect()
}
