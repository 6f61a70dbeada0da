//! Neural-network ops on `N x C x H x W` activations.

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Per-channel running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded in; zero means uninitialized.
    pub batches: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels], batches: 0 }
    }
}

fn dims4(x: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(format!("{what} expects N x C x H x W, got {s:?}"))),
    }
}

/// Source index pairs and weights for half-pixel-center linear resampling
/// of one axis: `src = (i + 0.5) * in / out - 0.5`, clamped to the borders.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Gathers the input pixels seen by kernel tap `(ki, kj)` into a `C x P` block.
#[allow(clippy::too_many_arguments)]
fn gather_tap<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ki: usize,
    kj: usize,
    stride: usize,
    pad: usize,
    col: &mut [T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut col[ch * p..(ch + 1) * p];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            if iy < 0 || iy >= h as isize {
                row.fill(T::zero());
                continue;
            }
            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
            for (ox, v) in row.iter_mut().enumerate() {
                let ix = (ox * stride + kj) as isize - pad as isize;
                *v = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_tap<T: Scalar>(
    dx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ki: usize,
    kj: usize,
    stride: usize,
    pad: usize,
    col: &[T],
) {
    let p = oh * ow;
    for ch in 0..c {
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        let src = &col[ch * p..(ch + 1) * p];
        for oy in 0..oh {
            let iy = (oy * stride + ki) as isize - pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * stride + kj) as isize - pad as isize;
                if ix >= 0 && ix < w as isize {
                    let d = &mut dst[iy as usize * w + ix as usize];
                    *d = *d + src[oy * ow + ox];
                }
            }
        }
    }
}

impl<T: Scalar> Var<T> {
    /// 2-D cross-correlation (the kernel is not flipped).
    ///
    /// `weight` is `OutC x InC x kH x kW`, `bias` (optional) is `OutC`. Output
    /// extents are `floor((H + 2p - k) / s) + 1`.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "conv2d input")?;
        let [oc, ic, kh, kw] = dims4(weight.value(), "conv2d weight")?;
        if ic != c {
            return Err(Error::shape(format!("conv2d: input has {c} channels, weight expects {ic}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if let Some(b) = bias {
            if b.shape() != [oc] {
                return Err(Error::shape(format!("conv2d bias {:?}, expected [{oc}]", b.shape())));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!("conv2d output would be empty for {h}x{w} input")));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let p = oh * ow;
        let kk = kh * kw;
        let wd = weight.value().data();
        let xd = self.value().data();
        let mut out = vec![T::zero(); n * oc * p];
        let mut col = vec![T::zero(); c * p];
        for b in 0..n {
            let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out[b * oc * p..(b + 1) * oc * p];
            for ki in 0..kh {
                for kj in 0..kw {
                    gather_tap(xb, c, h, w, oh, ow, ki, kj, stride, padding, &mut col);
                    T::gemm(
                        oc,
                        c,
                        p,
                        T::one(),
                        &wd[ki * kw + kj..],
                        ((c * kk) as isize, kk as isize),
                        &col,
                        (p as isize, 1),
                        T::one(),
                        ob,
                        (p as isize, 1),
                    );
                }
            }
            if let Some(bias) = bias {
                for (o, &bv) in bias.value().data().iter().enumerate() {
                    for v in &mut ob[o * p..(o + 1) * p] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![n, oc, oh, ow], out);
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        let backward = move |g: &Tensor<T>, needs: &[bool]| {
            let gd = g.data();
            let (xd, wd) = (xv.data(), wv.data());
            let mut dx = needs[0].then(|| vec![T::zero(); xd.len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wd.len()]);
            let mut col = vec![T::zero(); c * p];
            for b in 0..n {
                let gb = &gd[b * oc * p..(b + 1) * oc * p];
                for ki in 0..kh {
                    for kj in 0..kw {
                        if let Some(dw) = dw.as_mut() {
                            let xb = &xd[b * c * h * w..(b + 1) * c * h * w];
                            gather_tap(xb, c, h, w, oh, ow, ki, kj, stride, padding, &mut col);
                            // dW_tap += dOut * col^T
                            T::gemm(
                                oc,
                                p,
                                c,
                                T::one(),
                                gb,
                                (p as isize, 1),
                                &col,
                                (1, p as isize),
                                T::one(),
                                &mut dw[ki * kw + kj..],
                                ((c * kk) as isize, kk as isize),
                            );
                        }
                        if let Some(dx) = dx.as_mut() {
                            // dcol = W_tap^T * dOut
                            T::gemm(
                                c,
                                oc,
                                p,
                                T::one(),
                                &wd[ki * kw + kj..],
                                (kk as isize, (c * kk) as isize),
                                gb,
                                (p as isize, 1),
                                T::zero(),
                                &mut col,
                                (p as isize, 1),
                            );
                            let dxb = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                            scatter_tap(dxb, c, h, w, oh, ow, ki, kj, stride, padding, &col);
                        }
                    }
                }
            }
            let db = needs.get(2).copied().unwrap_or(false).then(|| {
                let mut db = vec![T::zero(); oc];
                for b in 0..n {
                    for (o, d) in db.iter_mut().enumerate() {
                        let s: T = gd[(b * oc + o) * p..(b * oc + o + 1) * p].iter().copied().sum();
                        *d = *d + s;
                    }
                }
                Tensor::from_parts(vec![oc], db)
            });
            vec![
                dx.map(|d| Tensor::from_parts(xv.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                db,
            ]
        };
        match bias {
            Some(bias) => Var::record(&[self, weight, bias], value, backward),
            None => Var::record(&[self, weight], value, move |g, needs| {
                let mut grads = backward(g, needs);
                grads.truncate(2);
                grads
            }),
        }
    }

    /// Max pooling with a `k x k` window; the gradient goes to the first maximum.
    pub fn maxpool2d(&self, k: usize, stride: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "maxpool2d")?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(Error::shape(format!("maxpool2d k={k} s={stride} on {h}x{w}")));
        }
        if self.value().numel() > u32::MAX as usize {
            return Err(Error::invalid("maxpool2d input too large"));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xd = self.value().data();
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for dy in 0..k {
                        for dx in 0..k {
                            let at = base + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[at] > xd[best] {
                                best = at;
                            }
                        }
                    }
                    argmax.push(best as u32);
                }
            }
        }
        let argmax = self.tape().branches(argmax);
        let out: Vec<T> = argmax.iter().map(|&at| xd[at as usize]).collect();
        let in_shape = self.shape().to_vec();
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Var::record(&[self], value, move |g, _| {
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for (&at, &gv) in argmax.iter().zip(g.data()) {
                dx[at as usize] = dx[at as usize] + gv;
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        })
    }

    /// Bilinear resize with half-pixel centers and border clamping.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::ZeroExtent(vec![n, c, out_h, out_w]));
        }
        if (out_h, out_w) == (h, w) {
            return self.reshape(&[n, c, h, w]);
        }
        let ty: Vec<(usize, usize, T)> =
            linear_taps(h, out_h).into_iter().map(|(a, b, f)| (a, b, T::from_f64c(f))).collect();
        let tx: Vec<(usize, usize, T)> =
            linear_taps(w, out_w).into_iter().map(|(a, b, f)| (a, b, T::from_f64c(f))).collect();
        let xd = self.value().data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, out_h, out_w], out);
        Var::record(&[self], value, move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                let src = &gd[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = src[oy * out_w + ox];
                        let (gt, gb) = (gv * (T::one() - fy), gv * fy);
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - fx);
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gt * fx;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - fx);
                        dst[y1 * w + x1] = dst[y1 * w + x1] + gb * fx;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Averages over the width (X direction): `N x C x H x 1`.
    pub fn adaptive_avgpool_x(&self) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "adaptive_avgpool_x")?;
        let inv = T::one() / T::from_usize(w).unwrap();
        let xd = self.value().data();
        let out: Vec<T> = (0..n * c * h)
            .map(|row| xd[row * w..(row + 1) * w].iter().copied().sum::<T>() * inv)
            .collect();
        Var::record(&[self], Tensor::from_parts(vec![n, c, h, 1], out), move |g, _| {
            let dx = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, w)).collect();
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Averages over the height (Y direction): `N x C x 1 x W`.
    pub fn adaptive_avgpool_y(&self) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "adaptive_avgpool_y")?;
        let inv = T::one() / T::from_usize(h).unwrap();
        let xd = self.value().data();
        let mut out = vec![T::zero(); n * c * w];
        for plane in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    out[plane * w + x] = out[plane * w + x] + xd[plane * h * w + y * w + x];
                }
            }
        }
        for v in &mut out {
            *v = *v * inv;
        }
        Var::record(&[self], Tensor::from_parts(vec![n, c, 1, w], out), move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); n * c * h * w];
            for plane in 0..n * c {
                for y in 0..h {
                    for x in 0..w {
                        dx[plane * h * w + y * w + x] = gd[plane * w + x] * inv;
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], dx))]
        })
    }

    /// Batch normalization over `N, H, W` per channel (eps 1e-5, momentum 0.1).
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// unbiased variance into `stats`; eval mode uses `stats` and fails if no
    /// training batch was ever seen.
    pub fn batchnorm2d(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &mut RunningStats<T>,
        mode: BnMode,
        name: &str,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = dims4(self.value(), "batchnorm2d")?;
        if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d '{name}': {c} channels, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.value().data();
        let eps = T::from_f64c(BN_EPS);
        let (mean, inv_std) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|b| &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
                    let m = vals.clone().map(|v| v.to_f64c()).sum::<f64>() / count as f64;
                    let v = vals.map(|v| (v.to_f64c() - m).powi(2)).sum::<f64>() / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let mom = BN_MOMENTUM;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    stats.mean[ch] =
                        T::from_f64c((1.0 - mom) * stats.mean[ch].to_f64c() + mom * mean[ch]);
                    stats.var[ch] =
                        T::from_f64c((1.0 - mom) * stats.var[ch].to_f64c() + mom * var[ch] * unbias);
                }
                stats.batches += 1;
                (
                    mean.iter().map(|&m| T::from_f64c(m)).collect::<Vec<_>>(),
                    var.iter().map(|&v| T::one() / (T::from_f64c(v) + eps).sqrt()).collect::<Vec<_>>(),
                )
            }
            BnMode::Eval => {
                if stats.batches == 0 {
                    return Err(Error::UninitializedStats(name.to_string()));
                }
                (stats.mean.clone(), stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect())
            }
        };
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let gv = gamma.value.clone();
        let shape = self.shape().to_vec();
        Var::record(&[self, gamma, beta], Tensor::from_parts(shape.clone(), out), move |g, needs| {
            let gdat = g.data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_dy[ch] = sum_dy[ch] + gdat[i];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + gdat[i] * xhat[i];
                    }
                }
            }
            let dx = needs[0].then(|| {
                let m = T::from_usize(count).unwrap();
                let mut dx = vec![T::zero(); gdat.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let k = gv.data()[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = match mode {
                                BnMode::Train => {
                                    k * (gdat[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / m)
                                }
                                BnMode::Eval => k * gdat[i],
                            };
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                dx,
                needs[1].then(|| Tensor::from_parts(vec![c], sum_dy_xhat.clone())),
                needs[2].then(|| Tensor::from_parts(vec![c], sum_dy.clone())),
            ]
        })
    }

    /// `softmax(q k^T / sqrt(D)) v` for `q, k, v` of shape `T x D` or `B x T x D`.
    pub fn scaled_dot_attention(q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
        let rank = q.value().ndim();
        if !(rank == 2 || rank == 3) || k.value().ndim() != rank || v.value().ndim() != rank {
            return Err(Error::shape(format!(
                "attention expects rank 2 or 3, got {:?} {:?} {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let d = q.shape()[rank - 1];
        if k.shape() != q.shape() || v.shape()[rank - 2] != k.shape()[rank - 2] {
            return Err(Error::shape(format!(
                "attention q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let scores = q.matmul(&k.transpose(rank - 2, rank - 1)?)?.scale(1.0 / (d as f64).sqrt())?;
        scores.softmax(rank - 1)?.matmul(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn conv_of_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]).unwrap());
        let w = tape.leaf(Tensor::ones(&[1, 1, 2, 2]).unwrap());
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[4.0; 4]);
    }

    #[test]
    fn conv_one_by_one_identity() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::randn(&[2, 1, 4, 5], 3).unwrap());
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().value(), x.value());
    }

    #[test]
    fn conv_is_cross_correlation() {
        // an asymmetric kernel picks the right neighbour, not the left
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 3], vec![1., 2., 3.]).unwrap());
        let w = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0., 1.]).unwrap());
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().value().data(), &[2., 3.]);
    }

    #[test]
    fn conv_shape_rules() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 7, 7]).unwrap());
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]).unwrap());
        assert_eq!(x.conv2d(&w, None, 2, 1).unwrap().shape(), &[1, 4, 4, 4]);
        let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]).unwrap());
        assert!(x.conv2d(&bad, None, 1, 1).is_err());
        let big = tape.constant(Tensor::zeros(&[4, 3, 9, 9]).unwrap());
        assert!(x.conv2d(&big, None, 1, 0).is_err());
    }

    #[test]
    fn pools_average_the_right_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        assert_eq!(x.adaptive_avgpool_x().unwrap().value().data(), &[2., 5.]);
        assert_eq!(x.adaptive_avgpool_x().unwrap().shape(), &[1, 1, 2, 1]);
        assert_eq!(x.adaptive_avgpool_y().unwrap().value().data(), &[2.5, 3.5, 4.5]);
        assert_eq!(x.adaptive_avgpool_y().unwrap().shape(), &[1, 1, 1, 3]);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[1, 2, 5, 7], 0.3).unwrap());
        for (h, w) in [(1, 1), (10, 3), (13, 14)] {
            let r = c.bilinear_resize(h, w).unwrap();
            assert!(r.value().data().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        }
        let x = tape.constant(Tensor::randn(&[1, 1, 6, 6], 2).unwrap());
        assert_eq!(x.bilinear_resize(6, 6).unwrap().value(), x.value());
        assert!(x.bilinear_resize(0, 3).is_err());
    }

    #[test]
    fn maxpool_values_and_routing() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(&[1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 7., 6.]).unwrap(),
        );
        let y = x.maxpool2d(2, 2).unwrap();
        assert_eq!(y.value().data(), &[5., 7.]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_requires_stats() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::randn(&[4, 3, 4, 4], 9).unwrap().map(|v| 2.0 * v + 1.0));
        let gamma = tape.constant(Tensor::ones(&[3]).unwrap());
        let beta = tape.constant(Tensor::zeros(&[3]).unwrap());
        let mut stats = RunningStats::new(3);
        assert!(matches!(
            x.batchnorm2d(&gamma, &beta, &mut stats, BnMode::Eval, "bn"),
            Err(Error::UninitializedStats(_))
        ));
        let y = x.batchnorm2d(&gamma, &beta, &mut stats, BnMode::Train, "bn").unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| y.value().data()[(b * 3 + ch) * 16..(b * 3 + ch + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 64.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-5, "{m}");
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
        assert_eq!(stats.batches, 1);
        let g2 = tape.constant(Tensor::full(&[3], 2.0).unwrap());
        let b3 = tape.constant(Tensor::full(&[3], 3.0).unwrap());
        let z = x.batchnorm2d(&g2, &b3, &mut stats, BnMode::Train, "bn").unwrap();
        let mean = z.value().mean();
        let std = (z.value().data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 192.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-6);
        assert!((std - 2.0).abs() < 1e-3);
        assert!(x.batchnorm2d(&gamma, &beta, &mut stats, BnMode::Eval, "bn").is_ok());
    }

    #[test]
    fn attention_convex_combination() {
        let tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::randn(&[4, 3], 1).unwrap());
        let k = tape.constant(Tensor::randn(&[4, 3], 2).unwrap());
        let v = tape.constant(Tensor::full(&[4, 3], 1.5).unwrap());
        let out = Var::scaled_dot_attention(&q, &k, &v).unwrap();
        assert!(out.value().data().iter().all(|x| (x - 1.5).abs() < 1e-12));
        let q1 = tape.constant(Tensor::randn(&[1, 3], 3).unwrap());
        let v1 = tape.constant(Tensor::randn(&[1, 3], 4).unwrap());
        let out1 = Var::scaled_dot_attention(&q1, &q1, &v1).unwrap();
        assert!(out1.value().max_abs_diff(v1.value()) < 1e-15);
        let bad = tape.constant(Tensor::randn(&[4, 2], 5).unwrap());
        assert!(Var::scaled_dot_attention(&q, &bad, &v).is_err());
    }
}
