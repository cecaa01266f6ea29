use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::trainer::TrainConfig;

/// First and second moment buffers per trainable parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub m: HashMap<String, Vec<T>>,
    pub v: HashMap<String, Vec<T>>,
    /// Steps taken so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// All gradients are checked for finiteness before any parameter moves.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    for name in params.names().filter(|n| ParameterSet::<T>::is_trainable(n)) {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}[{i}] is {}",
                g.data()[i]
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        if !ParameterSet::<T>::is_trainable(name) {
            continue;
        }
        let g = grads[name].data();
        let n = p.numel();
        if g.len() != n {
            return Err(Error::dim("adam_step", p.dims(), &[g.len()]));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![T::zero(); n]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            let m_new = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let v_new = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::lit(m_new);
            *vi = T::lit(v_new);
            let update = cfg.learning_rate * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps_adam);
            *w = T::lit(w.as_f64() - update);
        }
    }
    Ok(())
}
