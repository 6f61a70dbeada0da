use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter tensor starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform,
    /// Kaiming-uniform scaled down by the given factor.
    ScaledKaiming(f64),
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
    Zeros,
    Ones,
    /// 3x3 kernel passing each channel straight through (centre tap 1).
    IdentityKernel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Specs collected while describing an architecture.
#[derive(Default)]
pub(crate) struct SpecList {
    pub params: Vec<ParamSpec>,
    /// Batch-norm layers: name and channel count.
    pub norms: Vec<(String, usize)>,
}

impl SpecList {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) {
        self.params.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    /// `k x k` conv without bias, then batch norm.
    pub fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.param(format!("{prefix}.conv.weight"), &[cout, cin, k, k], Init::KaimingUniform);
        self.param(format!("{prefix}.bn.gamma"), &[cout], Init::Ones);
        self.param(format!("{prefix}.bn.beta"), &[cout], Init::Zeros);
        self.norms.push((format!("{prefix}.bn"), cout));
    }

    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, init: Init) {
        self.param(format!("{prefix}.weight"), &[cout, cin, k, k], init);
        self.param(format!("{prefix}.bias"), &[cout], Init::Zeros);
    }

    /// Single-head attention projections `q, k, v, out` of width `dim`.
    pub fn attention(&mut self, prefix: &str, dim: usize) {
        for proj in ["q", "k", "v", "out"] {
            self.param(format!("{prefix}.{proj}.weight"), &[dim, dim], Init::XavierUniform);
            self.param(format!("{prefix}.{proj}.bias"), &[dim], Init::Zeros);
        }
    }
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut rng::Rng) -> Result<Tensor<T>> {
    let shape = &spec.shape;
    let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
    let fan_in = if shape.len() == 2 { shape[0] } else { fan_in };
    let fan_out = if shape.len() == 2 { shape[1] } else { shape[0] };
    match spec.init {
        Init::KaimingUniform => {
            let b = (6.0 / fan_in as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        }
        Init::ScaledKaiming(s) => {
            let b = s * (6.0 / fan_in as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        }
        Init::XavierUniform => {
            let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::uniform(shape, -b, b, rng)
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::IdentityKernel => {
            let [o, i, kh, kw] = shape[..] else {
                return Err(Error::invalid(format!("identity kernel needs rank 4, got {shape:?}")));
            };
            let mut t = Tensor::zeros(shape)?;
            for c in 0..o.min(i) {
                t.data_mut()[((c * i + c) * kh + kh / 2) * kw + kw / 2] = T::one();
            }
            Ok(t)
        }
    }
}

/// Learnable tensors plus batch-norm running statistics, keyed by stable
/// hierarchical names (`enc.0.a.conv.weight`, `fuse.mix1.q.bias`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub(crate) fn init(specs: &SpecList, seed: u64) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (i, spec) in specs.params.iter().enumerate() {
            let mut rng = rng::derived(seed, 1, i as u64);
            tensors.insert(spec.name.clone(), init_tensor(spec, &mut rng)?);
        }
        let stats =
            specs.norms.iter().map(|(n, c)| (n.clone(), RunningStats::new(*c))).collect();
        Ok(ModelParams { tensors, stats })
    }

    pub(crate) fn from_parts(
        tensors: BTreeMap<String, Tensor<T>>,
        stats: BTreeMap<String, RunningStats<T>>,
    ) -> Self {
        ModelParams { tensors, stats }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    /// Replaces a learnable tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}' is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn learnable_names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn stats(&self) -> &BTreeMap<String, RunningStats<T>> {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut BTreeMap<String, RunningStats<T>> {
        &mut self.stats
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64c(x.to_f64c())).collect();
                    (k.clone(), RunningStats { mean: conv(&s.mean), var: conv(&s.var), batches: s.batches })
                })
                .collect(),
        }
    }

    /// Checks every tensor and statistic against the shapes `specs` implies.
    pub(crate) fn validate(&self, specs: &SpecList) -> Result<()> {
        if specs.params.len() != self.tensors.len() || specs.norms.len() != self.stats.len() {
            return Err(Error::shape(format!(
                "expected {} tensors / {} norms, found {} / {}",
                specs.params.len(),
                specs.norms.len(),
                self.tensors.len(),
                self.stats.len()
            )));
        }
        for spec in &specs.params {
            match self.tensors.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "'{}' is {:?}, config implies {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::shape(format!("missing parameter '{}'", spec.name))),
            }
        }
        for (name, c) in &specs.norms {
            match self.stats.get(name) {
                Some(s) if s.mean.len() == *c && s.var.len() == *c => {}
                _ => return Err(Error::shape(format!("norm '{name}' missing or not {c} channels"))),
            }
        }
        Ok(())
    }

    /// Leaves for every learnable tensor on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Bound<T> {
        Bound {
            map: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect(),
        }
    }
}

/// Parameter values placed on a tape, looked up by name during a forward pass.
#[derive(Clone)]
pub struct Bound<T> {
    map: HashMap<String, Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<T>)>) -> Self {
        Bound { map: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<T>> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("parameter '{name}' is not bound")))
    }

    /// Gradients of every bound parameter after backward (zeros if unreached).
    pub fn gradients(&self) -> BTreeMap<String, Tensor<T>> {
        self.map
            .iter()
            .map(|(k, v)| {
                let g = v
                    .grad()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()).expect("bound shapes are valid"));
                (k.clone(), g)
            })
            .collect()
    }
}
