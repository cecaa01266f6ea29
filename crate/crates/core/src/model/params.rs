use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::UNetConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::RunningStats;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution weight drawn He-normal with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub kind: ParamKind,
}

struct Manifest(Vec<ParamSpec>);

impl Manifest {
    fn push(&mut self, name: String, dims: Vec<usize>, kind: ParamKind) {
        self.0.push(ParamSpec { name, dims, kind });
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{prefix}.w"), vec![cout, cin, k, k], ParamKind::Weight { fan_in: cin * k * k });
        self.push(format!("{prefix}.b"), vec![cout], ParamKind::Bias);
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.gamma"), vec![c], ParamKind::Gamma);
        self.push(format!("{prefix}.beta"), vec![c], ParamKind::Beta);
        self.push(format!("{prefix}.rmean"), vec![c], ParamKind::RunningMean);
        self.push(format!("{prefix}.rvar"), vec![c], ParamKind::RunningVar);
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv(&format!("{prefix}.conv1"), cin, cout, 3);
        self.bn(&format!("{prefix}.bn1"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        self.bn(&format!("{prefix}.bn2"), cout);
    }
}

/// Names, shapes and kinds of every tensor of a network, in canonical order:
/// encoder shallow to deep, bottleneck, decoder deep to shallow, output head.
pub fn manifest(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let mut m = Manifest(Vec::new());
    for i in 0..cfg.depth {
        let cin = if i == 0 { cfg.in_channels } else { cfg.stage_channels(i - 1) };
        m.block(&format!("enc{i}"), cin, cfg.stage_channels(i));
    }
    m.block("bottleneck", cfg.stage_channels(cfg.depth - 1), cfg.stage_channels(cfg.depth));
    for i in (0..cfg.depth).rev() {
        let (cin, cout) = (cfg.stage_channels(i + 1), cfg.stage_channels(i));
        // transposed kernels are laid out (in, out, 2, 2); every output pixel
        // sees exactly one tap per input channel
        m.push(format!("dec{i}.up.w"), vec![cin, cout, 2, 2], ParamKind::Weight { fan_in: cin });
        m.push(format!("dec{i}.up.b"), vec![cout], ParamKind::Bias);
        m.block(&format!("dec{i}"), 2 * cout, cout);
    }
    m.conv("out", cfg.base_channels, cfg.out_channels, 1);
    m.0
}

/// Named, ordered weights and batch-norm state of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn from_entries(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Parameter(format!("duplicate parameter name {name}")));
            }
        }
        Ok(ParameterSet { entries, index })
    }

    /// Fresh parameters: He-normal weights, zero biases, unit gamma, zero
    /// beta, running mean 0 and running variance 1. Same seed, same bits.
    pub fn init(cfg: &UNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = manifest(cfg)
            .into_iter()
            .map(|spec| {
                let fill = |v: f64| Tensor::full(&spec.dims, T::lit(v));
                let t = match spec.kind {
                    ParamKind::Weight { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                            .map_err(|e| Error::Parameter(e.to_string()))?;
                        Tensor::from_fn(&spec.dims, |_| T::lit(normal.sample(&mut rng)))
                    }
                    ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => fill(0.0),
                    ParamKind::Gamma | ParamKind::RunningVar => fill(1.0),
                }?;
                Ok((spec.name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars, including batch-norm running statistics.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Parameter(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(".rmean") || name.ends_with(".rvar"))
    }

    pub fn running_stats(&self, prefix: &str) -> Result<RunningStats<T>> {
        let mut stats = RunningStats::new(0);
        stats.mean = self.require(&format!("{prefix}.rmean"))?.data().to_vec();
        stats.var = self.require(&format!("{prefix}.rvar"))?.data().to_vec();
        Ok(stats)
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against the manifest of `cfg`, in order.
    pub fn check_against(&self, cfg: &UNetConfig) -> Result<()> {
        let specs = manifest(cfg);
        if specs.len() != self.entries.len() {
            return Err(Error::Parameter(format!(
                "configuration expects {} tensors, parameter set has {}",
                specs.len(),
                self.entries.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.entries) {
            if spec.name != *name || spec.dims != t.dims() {
                return Err(Error::Parameter(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.dims(),
                    spec.name,
                    spec.dims
                )));
            }
        }
        Ok(())
    }
}
