//! Central-difference gradient verification.
//!
//! The analytic gradient comes from a [`Tape`] at the precision under test;
//! the numeric reference always re-evaluates the graph in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A scalar-valued computation that can be recorded at any precision.
pub trait ScalarGraph {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Denominator floor of the relative error, so exactly-zero gradients
    /// compare in absolute terms.
    pub abs_floor: f64,
    /// Checks at most this many evenly spaced elements per input.
    pub max_probes_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-3,
            abs_floor: 1e-6,
            max_probes_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<G: ScalarGraph>(graph: &G, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = graph.build(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract("gradient check needs a scalar graph".into()));
    }
    Ok(value.data()[0])
}

fn probe_indices(numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < numel => (0..m).map(|i| i * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Compares the tape gradient at precision `P` against central differences
/// of the `f64` graph, over every element (or a deterministic subset) of
/// every input.
pub fn grad_check<P: Scalar, G: ScalarGraph>(
    graph: &G,
    probes: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut tape = Tape::<P>::new();
    let vars: Vec<Var> = probes.iter().map(|t| tape.leaf(t.cast())).collect();
    let out = graph.build(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(probes)
        .map(|(&v, p)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut inputs = probes.to_vec();
    for (i, probe) in probes.iter().enumerate() {
        for j in probe_indices(probe.numel(), opts.max_probes_per_input) {
            let x0 = probe.data()[j];
            inputs[i].data_mut()[j] = x0 + opts.step;
            let plus = evaluate(graph, &inputs)?;
            inputs[i].data_mut()[j] = x0 - opts.step;
            let minus = evaluate(graph, &inputs)?;
            inputs[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i][j];
            let err = relative_error(a, numeric, opts.abs_floor);
            report.checked += 1;
            if !(err <= report.max_rel_error) || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
