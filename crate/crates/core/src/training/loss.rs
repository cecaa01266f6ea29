use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Added to the Dice denominator only.
    pub eps_dice: f64,
    /// Predictions are clamped to `[bce_clamp, 1 - bce_clamp]` inside the logs.
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps_dice: 1e-7,
            bce_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_dice > 0.0 && self.eps_dice <= 1e-3) {
            return Err(Error::Parameter(format!("eps_dice {} outside (0, 1e-3]", self.eps_dice)));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(Error::Parameter(format!("bce_clamp {} outside (0, 0.5)", self.bce_clamp)));
        }
        Ok(())
    }
}

pub fn bce_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    kernels::bce(y, yhat, cfg.bce_clamp)
}

/// Pooled over the whole batch: one intersection and one denominator.
pub fn dice_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    kernels::dice(y, yhat, cfg.eps_dice)
}

pub fn dice_bce_loss<T: Scalar>(y: &Tensor<T>, yhat: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(bce_loss(y, yhat, cfg)? + dice_loss(y, yhat, cfg)?)
}

/// Records `bce + dice` of `yhat` against `target`; gradients flow through both.
pub fn dice_bce_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    yhat: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let b = tape.bce(yhat, target, cfg.bce_clamp)?;
    let d = tape.dice(yhat, target, cfg.eps_dice)?;
    tape.add(b, d)
}
