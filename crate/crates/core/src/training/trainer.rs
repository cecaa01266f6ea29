use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::log::{write_epoch_log, EpochLog};
use super::loss::{dice_bce_loss, dice_bce_on_tape, LossConfig};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayImage};
use crate::model::{save_checkpoint, Checkpoint, UNet, UNetConfig};
use crate::tensor::{Mode, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    /// Seeds initialization, shuffling, and dropout.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 50,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps_adam > 0.0) {
            return Err(Error::Parameter(format!("eps_adam {} must be positive", self.eps_adam)));
        }
        Ok(())
    }
}

/// A preprocessed image with its ground-truth mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and `train_log.csv` go here when set.
    pub out_dir: Option<PathBuf>,
    /// When false every `wall_seconds` is written as 0 so logs are byte-reproducible.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNet<f32>,
    pub logs: Vec<EpochLog>,
    pub steps: u64,
    /// Checkpoints written, oldest first.
    pub checkpoints: Vec<PathBuf>,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

fn stack(samples: &[&Sample], cfg: &UNetConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples[0];
    let (h, w) = (first.image.height, first.image.width);
    let mut x = Vec::with_capacity(samples.len() * h * w);
    let mut y = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) || (s.mask.height, s.mask.width) != (h, w) {
            return Err(Error::Shape(format!(
                "sample {} is {}x{} (mask {}x{}), batch expects {h}x{w}",
                s.id, s.image.height, s.image.width, s.mask.height, s.mask.width
            )));
        }
        x.extend_from_slice(&s.image.data);
        y.extend(s.mask.data.iter().map(|&m| f32::from(m)));
    }
    let n = samples.len();
    if cfg.in_channels != 1 || cfg.out_channels != 1 {
        return Err(Error::Parameter("training expects single-channel input and output".into()));
    }
    Ok((Tensor::new(&[n, 1, h, w], x)?, Tensor::new(&[n, 1, h, w], y)?))
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn validation_loss(model: &UNet<f32>, val: &[Sample], batch: usize, loss: &LossConfig) -> Result<Option<f64>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for chunk in val.chunks(batch) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack(&refs, &model.config)?;
        let yhat = model.predict(&x)?;
        total += dice_bce_loss(&y, &yhat, loss)? * chunk.len() as f64;
    }
    Ok(Some(total / val.len() as f64))
}

/// Trains a freshly initialized network with Adam on DiceBCE.
///
/// Initialization, epoch shuffles, and dropout masks all derive from
/// `train.seed`, so two runs with equal inputs produce equal parameters.
pub fn train(
    model_cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (h, w) = (train_set[0].image.height, train_set[0].image.width);
    let mut model = UNet::<f32>::build(model_cfg.clone(), train_cfg.seed)?;
    model.check_input_dims(&[1, 1, h, w])?;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut adam = AdamState::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(train_cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0u64;

    let mut write_ckpt = |model: &UNet<f32>, step: u64, name: String| -> Result<()> {
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(name);
            let ckpt = Checkpoint {
                config: model.config.clone(),
                params: model.params.clone(),
                step,
                input_size: (h, w),
            };
            save_checkpoint(&ckpt, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    };

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(train_cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = stack(&batch, model_cfg)?;
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let mut vars = HashMap::new();
            let rng = ChaCha8Rng::seed_from_u64(step_seed(train_cfg.seed, step));
            let (out, updates) = model.forward_on_tape(&mut tape, input, &mut vars, Mode::Train, rng)?;
            let loss = dice_bce_on_tape(&mut tape, out, &y, loss_cfg)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            tape.backward(loss)?;
            let mut grads = HashMap::with_capacity(vars.len());
            for (name, v) in vars {
                if let Some(g) = tape.take_grad(v) {
                    grads.insert(name, g);
                }
            }
            adam_step(&mut model.params, &grads, &mut adam, train_cfg)?;
            model.apply_stat_updates(updates)?;
            epoch_loss += loss_value * batch.len() as f64;
            step += 1;
        }
        let log = EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss: validation_loss(&model, val_set, train_cfg.batch_size, loss_cfg)?,
            wall_seconds: if opts.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&log);
        logs.push(log);
        if let Some(dir) = &opts.out_dir {
            write_epoch_log(&dir.join("train_log.csv"), &logs)?;
        }
        if train_cfg.checkpoint_every > 0
            && epoch % train_cfg.checkpoint_every == 0
            && epoch != train_cfg.epochs
        {
            write_ckpt(&model, step, format!("checkpoint_epoch{epoch:04}.ckpt"))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        if logs.is_empty() {
            write_epoch_log(&dir.join("train_log.csv"), &logs)?;
        }
    }
    write_ckpt(&model, step, "final.ckpt".into())?;
    Ok(TrainOutcome {
        model,
        logs,
        steps: step,
        checkpoints,
    })
}
