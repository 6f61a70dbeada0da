//! Building blocks shared by the encoder, decoders, fusion module and flow head.

use std::cell::RefCell;
use std::collections::BTreeMap;

use super::params::Bound;
use crate::autodiff::{BnMode, RunningStats, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Parameters, mode and running-statistic updates for one forward pass.
pub(crate) struct Ctx<'a, T> {
    pub bound: &'a Bound<T>,
    pub stats: &'a BTreeMap<String, RunningStats<T>>,
    pub mode: BnMode,
    pub updated: RefCell<BTreeMap<String, RunningStats<T>>>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(bound: &'a Bound<T>, stats: &'a BTreeMap<String, RunningStats<T>>, mode: BnMode) -> Self {
        Ctx { bound, stats, mode, updated: RefCell::new(BTreeMap::new()) }
    }

    pub fn p(&self, name: &str) -> Result<Var<T>> {
        self.bound.get(name)
    }

    pub fn bn(&self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let mut stats = self
            .stats
            .get(prefix)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no running stats for '{prefix}'")))?;
        let y = x.batchnorm2d(
            &self.p(&format!("{prefix}.gamma"))?,
            &self.p(&format!("{prefix}.beta"))?,
            &mut stats,
            self.mode,
            prefix,
        )?;
        if self.mode == BnMode::Train {
            self.updated.borrow_mut().insert(prefix.to_string(), stats);
        }
        Ok(y)
    }

    /// Same-padded `k x k` conv, batch norm, ReLU.
    pub fn conv_bn_relu(&self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let w = self.p(&format!("{prefix}.conv.weight"))?;
        let k = w.shape()[2];
        let y = x.conv2d(&w, None, 1, k / 2)?;
        self.bn(&format!("{prefix}.bn"), &y)?.relu()
    }

    /// Same-padded conv with bias.
    pub fn conv(&self, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        let k = w.shape()[2];
        x.conv2d(&w, Some(&b), 1, k / 2)
    }
}

/// `x W + b` over the last axis of `x` (`... x in` -> `... x out`).
pub(crate) fn linear<T: Scalar>(bound: &Bound<T>, prefix: &str, x: &Var<T>) -> Result<Var<T>> {
    let w = bound.get(&format!("{prefix}.weight"))?;
    let b = bound.get(&format!("{prefix}.bias"))?;
    let shape = x.shape().to_vec();
    let din = *shape.last().expect("rank >= 1");
    let rows = x.value().numel() / din;
    let y = x.reshape(&[rows, din])?.matmul(&w)?.add(&b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = w.shape()[1];
    y.reshape(&out_shape)
}

/// Residual single-head self-attention over tokens `N x T x D`.
pub(crate) fn self_attention<T: Scalar>(
    bound: &Bound<T>,
    prefix: &str,
    tokens: &Var<T>,
    position: Option<&Var<T>>,
) -> Result<Var<T>> {
    let qk_in = match position {
        Some(pe) => tokens.add(pe)?,
        None => tokens.clone(),
    };
    let q = linear(bound, &format!("{prefix}.q"), &qk_in)?;
    let k = linear(bound, &format!("{prefix}.k"), &qk_in)?;
    let v = linear(bound, &format!("{prefix}.v"), tokens)?;
    let attended = Var::scaled_dot_attention(&q, &k, &v)?;
    tokens.add(&linear(bound, &format!("{prefix}.out"), &attended)?)
}

/// Residual self-attention over a sequence stored as `N x C x T x 1`.
pub(crate) fn sequence_attention<T: Scalar>(
    bound: &Bound<T>,
    prefix: &str,
    seq: &Var<T>,
) -> Result<Var<T>> {
    let [n, c, t, one] = seq.shape()[..] else {
        return Err(Error::shape(format!("sequence must be N x C x T x 1, got {:?}", seq.shape())));
    };
    if one != 1 {
        return Err(Error::shape(format!("sequence must be N x C x T x 1, got {:?}", seq.shape())));
    }
    let tokens = seq.reshape(&[n, c, t])?.transpose(1, 2)?;
    let out = self_attention(bound, prefix, &tokens, None)?;
    out.transpose(1, 2)?.reshape(&[n, c, t, 1])
}

/// Fixed 2-D sinusoidal encodings for an `h x w` grid of `dim`-wide tokens:
/// half the channels encode the row, half the column.
pub(crate) fn positional_encoding<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (i, v) in row.iter_mut().enumerate() {
                let (pos, j, span) = if i < half { (y, i, half) } else { (x, i - half, dim - half) };
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / span.max(1) as f64);
                let a = pos as f64 * freq;
                *v = T::from_f64c(if j % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Tensor::from_parts(vec![1, h * w, dim], data)
}
