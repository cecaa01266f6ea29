use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::UNetConfig;
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ProbabilityMap};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, RunningStats};
use crate::tensor::{Mode, Tape, Tensor, Var};

/// Batch statistics a train-mode forward pass folded into one BN layer.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub prefix: String,
    pub stats: RunningStats<T>,
}

/// The primitive layer calls the network is written against, so one
/// architecture definition drives both the recording (tape) and the
/// eager eval path.
trait Exec<T: Scalar> {
    type V;
    fn param(&mut self, name: &str) -> Result<Self::V>;
    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv1x1(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn batchnorm(&mut self, x: &Self::V, prefix: &str) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    fn dropout(&mut self, x: &Self::V, p: f64) -> Result<Self::V>;
    fn maxpool(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
}

fn conv_block<T: Scalar, E: Exec<T>>(
    e: &mut E,
    x: &E::V,
    prefix: &str,
    dropout: Option<f64>,
) -> Result<E::V> {
    let mut h = None;
    for j in 1..=2 {
        let input = h.as_ref().unwrap_or(x);
        let w = e.param(&format!("{prefix}.conv{j}.w"))?;
        let b = e.param(&format!("{prefix}.conv{j}.b"))?;
        let y = e.conv2d(input, &w, &b)?;
        let y = e.batchnorm(&y, &format!("{prefix}.bn{j}"))?;
        h = Some(e.relu(&y));
    }
    let h = h.expect("two convolutions ran");
    match dropout {
        Some(p) => e.dropout(&h, p),
        None => Ok(h),
    }
}

fn unet_forward<T: Scalar, E: Exec<T>>(cfg: &UNetConfig, e: &mut E, input: E::V) -> Result<E::V> {
    let p = cfg.dropout_p;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = input;
    for i in 0..cfg.depth {
        let y = conv_block(e, &x, &format!("enc{i}"), cfg.encoder_dropout(i).then_some(p))?;
        x = e.maxpool(&y)?;
        skips.push(y);
    }
    x = conv_block(e, &x, "bottleneck", cfg.bottleneck_dropout().then_some(p))?;
    for i in (0..cfg.depth).rev() {
        let w = e.param(&format!("dec{i}.up.w"))?;
        let b = e.param(&format!("dec{i}.up.b"))?;
        let up = e.conv_transpose2d(&x, &w, &b)?;
        let skip = skips.pop().expect("one skip per encoder stage");
        let cat = e.concat(&up, &skip)?;
        x = conv_block(e, &cat, &format!("dec{i}"), cfg.decoder_dropout().then_some(p))?;
    }
    let w = e.param("out.w")?;
    let b = e.param("out.b")?;
    let logits = e.conv1x1(&x, &w, &b)?;
    Ok(e.sigmoid(&logits))
}

struct TapeExec<'a, T: Scalar, R: Rng> {
    tape: &'a mut Tape<T>,
    params: &'a ParameterSet<T>,
    vars: &'a mut HashMap<String, Var>,
    updates: Vec<StatUpdate<T>>,
    mode: Mode,
    rng: R,
}

impl<T: Scalar, R: Rng> Exec<T> for TapeExec<'_, T, R> {
    type V = Var;

    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.require(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.tape.conv2d(*x, *w, *b)
    }

    fn conv1x1(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.tape.conv1x1(*x, *w, *b)
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var> {
        self.tape.conv_transpose2d(*x, *w, *b)
    }

    fn batchnorm(&mut self, x: &Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mut stats = self.params.running_stats(prefix)?;
        let y = self.tape.batchnorm2d(*x, gamma, beta, &mut stats, self.mode)?;
        if self.mode == Mode::Train {
            self.updates.push(StatUpdate {
                prefix: prefix.to_string(),
                stats,
            });
        }
        Ok(y)
    }

    fn relu(&mut self, x: &Var) -> Var {
        self.tape.relu(*x)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        self.tape.sigmoid(*x)
    }

    fn dropout(&mut self, x: &Var, p: f64) -> Result<Var> {
        self.tape.dropout2d(*x, p, self.mode, &mut self.rng)
    }

    fn maxpool(&mut self, x: &Var) -> Result<Var> {
        self.tape.maxpool2x2(*x)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.concat_channels(*a, *b)
    }
}

/// Eval-mode evaluation without lineage; intermediate maps are freed as
/// soon as the architecture stops referencing them.
struct EagerExec<'a, T> {
    params: &'a ParameterSet<T>,
}

impl<'a, T: Scalar> Exec<T> for EagerExec<'a, T> {
    type V = Cow<'a, Tensor<T>>;

    fn param(&mut self, name: &str) -> Result<Self::V> {
        Ok(Cow::Borrowed(self.params.require(name)?))
    }

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::conv2d(x, w, b).map(Cow::Owned)
    }

    fn conv1x1(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::conv1x1(x, w, b).map(Cow::Owned)
    }

    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::conv_transpose2d(x, w, b).map(Cow::Owned)
    }

    fn batchnorm(&mut self, x: &Self::V, prefix: &str) -> Result<Self::V> {
        let gamma = self.params.require(&format!("{prefix}.gamma"))?;
        let beta = self.params.require(&format!("{prefix}.beta"))?;
        let stats = self.params.running_stats(prefix)?;
        let (y, _) = kernels::batchnorm2d_eval(x, gamma.data(), beta.data(), &stats)?;
        Ok(Cow::Owned(y))
    }

    fn relu(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(kernels::relu(x))
    }

    fn sigmoid(&mut self, x: &Self::V) -> Self::V {
        Cow::Owned(kernels::sigmoid(x))
    }

    fn dropout(&mut self, x: &Self::V, _p: f64) -> Result<Self::V> {
        Ok(x.clone())
    }

    fn maxpool(&mut self, x: &Self::V) -> Result<Self::V> {
        kernels::maxpool2x2(x).map(|(y, _)| Cow::Owned(y))
    }

    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::concat_channels(a, b).map(Cow::Owned)
    }
}

/// A configured network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> UNet<T> {
    /// Builds a freshly initialized network; see [`ParameterSet::init`].
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&config, seed)?;
        Ok(UNet { config, params })
    }

    pub fn from_parts(config: UNetConfig, params: ParameterSet<T>) -> Result<Self> {
        config.validate()?;
        params.check_against(&config)?;
        Ok(UNet { config, params })
    }

    pub fn check_input_dims(&self, dims: &[usize]) -> Result<()> {
        let [_, c, h, w] = dims else {
            return Err(Error::Shape(format!("expected an (N, C, H, W) batch, got {dims:?}")));
        };
        if *c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must have height and width divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Trainable parameters are taken
    /// from `vars` when present, otherwise added as leaves and inserted, so
    /// the caller can read their gradients after `backward`. In train mode
    /// the returned updates carry the new batch-norm running statistics;
    /// they are not applied to `self`.
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        vars: &mut HashMap<String, Var>,
        mode: Mode,
        rng: R,
    ) -> Result<(Var, Vec<StatUpdate<T>>)> {
        self.check_input_dims(tape.value(input).dims())?;
        let mut exec = TapeExec {
            tape,
            params: &self.params,
            vars,
            updates: Vec::new(),
            mode,
            rng,
        };
        let out = unet_forward(&self.config, &mut exec, input)?;
        Ok((out, exec.updates))
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) -> Result<()> {
        for u in updates {
            for (suffix, values) in [("rmean", u.stats.mean), ("rvar", u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let t = self
                    .params
                    .get_mut(&name)
                    .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))?;
                t.data_mut().copy_from_slice(&values);
            }
        }
        Ok(())
    }

    /// Eval-mode probabilities for an (N, in_channels, H, W) batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input_dims(batch.dims())?;
        let mut exec = EagerExec { params: &self.params };
        Ok(unet_forward(&self.config, &mut exec, Cow::Borrowed(batch))?.into_owned())
    }

    /// Full forward pass on a batch with values in [0, 1]. Train mode
    /// samples dropout masks from `seed` and updates the running statistics;
    /// eval mode is a pure function of the parameters and the batch.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>> {
        if let Some(v) = batch.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Parameter(format!("input value {v} outside [0, 1]")));
        }
        match mode {
            Mode::Eval => self.predict(batch),
            Mode::Train => {
                let mut tape = Tape::new();
                let x = tape.constant(batch.clone());
                let mut vars = HashMap::new();
                let rng = ChaCha8Rng::seed_from_u64(seed);
                let (out, updates) = self.forward_on_tape(&mut tape, x, &mut vars, mode, rng)?;
                self.apply_stat_updates(updates)?;
                Ok(tape.value(out).clone())
            }
        }
    }
}

/// `1` where `p >= threshold`, else `0`.
pub fn binarize(prob: &ProbabilityMap, threshold: f32) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold {threshold} outside [0, 1]")));
    }
    let data = prob.data.iter().map(|&p| u8::from(p >= threshold)).collect();
    BinaryMask::new(prob.width, prob.height, data)
}

/// Splits an (N, 1, H, W) output into per-sample probability maps.
pub fn probability_maps<T: Scalar>(out: &Tensor<T>) -> Result<Vec<ProbabilityMap>> {
    let (n, c, h, w) = out.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected a single output channel, got {c}")));
    }
    (0..n)
        .map(|i| {
            let data = out.data()[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect();
            ProbabilityMap::new(w, h, data)
        })
        .collect()
}
