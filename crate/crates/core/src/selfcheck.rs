//! The standard gradient-check suite: every differentiable layer and a
//! small end-to-end network, checked in `f64` against central differences.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{DropoutSites, ParameterSet, UNet, UNetConfig};
use crate::scalar::Scalar;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ScalarGraph};
use crate::tensor::kernels::RunningStats;
use crate::tensor::{Mode, Tape, Tensor, Var};
use crate::training::{dice_bce_on_tape, LossConfig};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(lo..hi)).expect("nonempty dims")
}

/// Values bounded away from zero, so no probe straddles the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("nonempty dims")
}

/// Distinct values on a 0.01 grid, so no probe changes a pooling winner.
fn distinct(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.005 * n as f64).collect();
    v.shuffle(rng);
    Tensor::new(dims, v).expect("matching length")
}

fn binary(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).expect("nonempty dims")
}

struct Weighted<F> {
    weights: Tensor<f64>,
    f: F,
}

trait Layer {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var>;
}

impl<F: Layer> ScalarGraph for Weighted<F> {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = self.f.apply(tape, v)?;
        tape.weighted_sum(y, &self.weights.cast())
    }
}

struct Conv2d;
impl Layer for Conv2d {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        tape.conv2d(v[0], v[1], v[2])
    }
}

struct Conv1x1;
impl Layer for Conv1x1 {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        tape.conv1x1(v[0], v[1], v[2])
    }
}

struct ConvTranspose;
impl Layer for ConvTranspose {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        tape.conv_transpose2d(v[0], v[1], v[2])
    }
}

struct BatchNormTrain;
impl Layer for BatchNormTrain {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let mut stats = RunningStats::new(tape.value(v[1]).numel());
        tape.batchnorm2d(v[0], v[1], v[2], &mut stats, Mode::Train)
    }
}

struct Relu;
impl Layer for Relu {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        Ok(tape.relu(v[0]))
    }
}

struct Sigmoid;
impl Layer for Sigmoid {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        Ok(tape.sigmoid(v[0]))
    }
}

struct MaxPool;
impl Layer for MaxPool {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        tape.maxpool2x2(v[0])
    }
}

struct DiceBce {
    target: Tensor<f64>,
    loss: LossConfig,
}

impl ScalarGraph for DiceBce {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        dice_bce_on_tape(tape, v[0], &self.target.cast(), &self.loss)
    }
}

/// DiceBCE of a train-mode U-Net; inputs are the image followed by every
/// trainable parameter in manifest order.
pub struct UNetLossGraph {
    pub config: UNetConfig,
    pub names: Vec<String>,
    pub template: ParameterSet<f64>,
    pub target: Tensor<f64>,
    pub loss: LossConfig,
    pub dropout_seed: u64,
}

impl UNetLossGraph {
    pub fn new(config: UNetConfig, seed: u64, target: Tensor<f64>) -> Result<(Self, Vec<Tensor<f64>>)> {
        let template = ParameterSet::<f64>::init(&config, seed)?;
        let names: Vec<String> = template
            .names()
            .filter(|n| ParameterSet::<f64>::is_trainable(n))
            .map(str::to_string)
            .collect();
        let probes = names.iter().map(|n| template.require(n).cloned()).collect::<Result<_>>()?;
        let graph = UNetLossGraph {
            config,
            names,
            template,
            target,
            loss: LossConfig::default(),
            dropout_seed: seed ^ 0xD0,
        };
        Ok((graph, probes))
    }
}

impl ScalarGraph for UNetLossGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let net = UNet::from_parts(self.config.clone(), self.template.cast::<T>())?;
        let mut vars: HashMap<String, Var> = self.names.iter().cloned().zip(v[1..].iter().copied()).collect();
        let rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let (out, _) = net.forward_on_tape(tape, v[0], &mut vars, Mode::Train, rng)?;
        dice_bce_on_tape(tape, out, &self.target.cast(), &self.loss)
    }
}

/// Options used for every entry of the suite.
pub fn suite_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        abs_floor: 1e-6,
        max_probes_per_input: None,
    }
}

fn check<G: ScalarGraph>(name: &'static str, graph: &G, probes: &[Tensor<f64>]) -> Result<SuiteEntry> {
    let report = grad_check::<f64, _>(graph, probes, &suite_options())?;
    Ok(SuiteEntry { name, report })
}

/// Runs every check; probe points are drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = uniform(r, &[2, 3, 5, 5], -1.0, 1.0);
    let w = uniform(r, &[4, 3, 3, 3], -0.5, 0.5);
    let b = uniform(r, &[4], -0.5, 0.5);
    let g = Weighted { weights: uniform(r, &[2, 4, 5, 5], -1.0, 1.0), f: Conv2d };
    out.push(check("conv2d", &g, &[x, w, b])?);

    let x = uniform(r, &[2, 3, 4, 4], -1.0, 1.0);
    let w = uniform(r, &[2, 3, 1, 1], -0.5, 0.5);
    let b = uniform(r, &[2], -0.5, 0.5);
    let g = Weighted { weights: uniform(r, &[2, 2, 4, 4], -1.0, 1.0), f: Conv1x1 };
    out.push(check("conv1x1", &g, &[x, w, b])?);

    let x = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
    let w = uniform(r, &[3, 2, 2, 2], -0.5, 0.5);
    let b = uniform(r, &[2], -0.5, 0.5);
    let g = Weighted { weights: uniform(r, &[2, 2, 6, 6], -1.0, 1.0), f: ConvTranspose };
    out.push(check("conv_transpose2d", &g, &[x, w, b])?);

    let x = uniform(r, &[2, 3, 4, 4], -2.0, 2.0);
    let gamma = uniform(r, &[3], 0.5, 1.5);
    let beta = uniform(r, &[3], -0.5, 0.5);
    let g = Weighted { weights: uniform(r, &[2, 3, 4, 4], -1.0, 1.0), f: BatchNormTrain };
    out.push(check("batchnorm2d_train", &g, &[x, gamma, beta])?);

    let x = away_from_zero(r, &[2, 3, 4, 4]);
    let g = Weighted { weights: uniform(r, &[2, 3, 4, 4], -1.0, 1.0), f: Relu };
    out.push(check("relu", &g, &[x])?);

    let x = uniform(r, &[2, 3, 4, 4], -4.0, 4.0);
    let g = Weighted { weights: uniform(r, &[2, 3, 4, 4], -1.0, 1.0), f: Sigmoid };
    out.push(check("sigmoid", &g, &[x])?);

    let x = distinct(r, &[2, 3, 4, 4]);
    let g = Weighted { weights: uniform(r, &[2, 3, 2, 2], -1.0, 1.0), f: MaxPool };
    out.push(check("maxpool2x2", &g, &[x])?);

    let yhat = uniform(r, &[2, 1, 4, 4], 0.05, 0.95);
    let g = DiceBce { target: binary(r, &[2, 1, 4, 4]), loss: LossConfig::default() };
    out.push(check("dice_bce_loss", &g, &[yhat])?);

    let config = UNetConfig {
        depth: 1,
        base_channels: 2,
        dropout_sites: DropoutSites::DeepEncoderAndBottleneck,
        ..UNetConfig::default()
    };
    let image = uniform(r, &[2, 1, 16, 16], 0.0, 1.0);
    let (graph, params) = UNetLossGraph::new(config, r.random(), binary(r, &[2, 1, 16, 16]))?;
    let mut probes = vec![image];
    // Freshly initialized beta = 0 puts a relu exactly on its kink whenever
    // dropout zeroes a whole input; random affine terms move off it.
    for (name, p) in graph.names.iter().zip(params) {
        probes.push(if name.ends_with(".gamma") {
            uniform(r, p.dims(), 0.5, 1.5)
        } else if name.ends_with(".beta") {
            uniform(r, p.dims(), -0.5, 0.5)
        } else {
            p
        });
    }
    out.push(check("unet_depth1", &graph, &probes)?);

    Ok(out)
}
