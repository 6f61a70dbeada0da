//! Elementwise, reduction and shape ops.

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Right-aligned numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the offsets
/// for each set of strides.
fn for_each_offset<const K: usize>(
    shape: &[usize],
    strides: [&[usize]; K],
    mut f: impl FnMut(usize, [usize; K]),
) {
    let n: usize = shape.iter().product();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for linear in 0..n {
        f(linear, offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for k in 0..K {
                offs[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..K {
                offs[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

fn broadcast_binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_offset(&out_shape, [&sa, &sb], |i, [oa, ob]| out[i] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out_shape, out))
}

/// Sums `grad` (of broadcast shape) back down to `shape`.
pub(crate) fn reduce_to<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let st = broadcast_strides(shape, grad.shape());
    let mut out = vec![T::zero(); shape.iter().product::<usize>().max(1)];
    let gd = grad.data();
    for_each_offset(grad.shape(), [&st], |i, [o]| out[o] = out[o] + gd[i]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Reorders axes: output axis `k` is input axis `perm[k]`.
pub(crate) fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = x.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for_each_offset(&out_shape, [&src_strides], |i, [o]| out[i] = xd[o]);
    Tensor::from_parts(out_shape, out)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

/// Copies `len` slices starting at `start` along `axis`.
fn narrow_data<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    let xd = x.data();
    for o in 0..outer {
        let base = o * n * inner + start * inner;
        out.extend_from_slice(&xd[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

impl<T: Scalar> Var<T> {
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<T>> {
        // df(x, y) is dy/dx given input x and output y
        let out = self.value().map(f);
        let x = self.value.clone();
        let y = std::rc::Rc::new(out.clone());
        Var::record(&[self], out, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a + b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record(&[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(g, &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a - b)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Var::record(&[self, other], out, move |g, needs| {
            vec![
                needs[0].then(|| reduce_to(g, &sa)),
                needs[1].then(|| reduce_to(&g.map(|v| -v), &sb)),
            ]
        })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = broadcast_binary(self.value(), other.value(), |a, b| a * b)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Var::record(&[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let full = broadcast_binary(g, &b, |g, b| g * b).expect("shapes checked");
                reduce_to(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = broadcast_binary(g, &a, |g, a| g * a).expect("shapes checked");
                reduce_to(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Var<T>> {
        let c = T::from_f64c(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<T>> {
        let c = T::from_f64c(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.scale(-1.0)
    }

    /// Piecewise-linear op: element `x` in branch `c` maps to
    /// `slope[c] * x + offset[c]`. Branches go through the tape so they can be
    /// logged and replayed.
    fn piecewise(&self, classify: impl Fn(T) -> u32, slope: [T; 3], offset: [T; 3]) -> Result<Var<T>> {
        let natural = self.value().data().iter().map(|&x| classify(x)).collect();
        let codes = self.tape.branches(natural);
        let data = self
            .value()
            .data()
            .iter()
            .zip(&codes)
            .map(|(&x, &c)| slope[c as usize] * x + offset[c as usize])
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        Var::record(&[self], out, move |g, _| {
            let data = g.data().iter().zip(&codes).map(|(&g, &c)| g * slope[c as usize]).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn relu(&self) -> Result<Var<T>> {
        let (z, o) = (T::zero(), T::one());
        self.piecewise(|x| u32::from(x > z), [z, o, z], [z; 3])
    }

    /// Logistic sigmoid, evaluated in a form that never overflows.
    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.unary(sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn log(&self) -> Result<Var<T>> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn abs(&self) -> Result<Var<T>> {
        // subgradient 0 at ties
        let (z, o) = (T::zero(), T::one());
        self.piecewise(|x| if x < z { 0 } else if x == z { 1 } else { 2 }, [-o, z, o], [z; 3])
    }

    pub fn square(&self) -> Result<Var<T>> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<T>> {
        let (lo, hi) = (T::from_f64c(lo), T::from_f64c(hi));
        let (z, o) = (T::zero(), T::one());
        self.piecewise(|x| if x < lo { 0 } else if x > hi { 2 } else { 1 }, [z, o, z], [lo, z, hi])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let out = Tensor::scalar(self.value().sum());
        Var::record(&[self], out, move |g, _| {
            vec![Some(Tensor::from_parts(shape.clone(), vec![g.data()[0]; shape.iter().product()]))]
        })
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let out = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Var::record(&[self], out, move |g, _| {
            vec![Some(Tensor::from_parts(orig.clone(), g.data().to_vec()))]
        })
    }

    /// Swaps two axes.
    pub fn transpose(&self, i: usize, j: usize) -> Result<Var<T>> {
        let rank = self.value().ndim();
        check_axis(i, rank)?;
        check_axis(j, rank)?;
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        let out = permute(self.value(), &perm);
        Var::record(&[self], out, move |g, _| vec![Some(permute(g, &perm))])
    }

    /// Reorders axes: output axis `k` is input axis `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let rank = self.value().ndim();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out = permute(self.value(), perm);
        let mut inverse = vec![0; rank];
        for (k, &p) in perm.iter().enumerate() {
            inverse[p] = k;
        }
        Var::record(&[self], out, move |g, _| vec![Some(permute(g, &inverse))])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        check_axis(axis, self.value().ndim())?;
        let extent = self.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) outside extent {extent}",
                start + len
            )));
        }
        let out = narrow_data(self.value(), axis, start, len);
        let shape = self.shape().to_vec();
        Var::record(&[self], out, move |g, _| {
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut full = vec![T::zero(); outer * n * inner];
            let gd = g.data();
            for o in 0..outer {
                let dst = o * n * inner + start * inner;
                let src = o * len * inner;
                full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<T>>> {
        check_axis(axis, self.value().ndim())?;
        let total: usize = sizes.iter().sum();
        if total != self.shape()[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not sum to extent {}",
                self.shape()[axis]
            )));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(xs: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let rank = first.value().ndim();
        check_axis(axis, rank)?;
        for x in xs {
            let s = x.shape();
            if s.len() != rank
                || s.iter().zip(first.shape()).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    s
                )));
            }
        }
        let sizes: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &n) in xs.iter().zip(&sizes) {
                let base = o * n * inner;
                out.extend_from_slice(&x.value().data()[base..base + n * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let value = Tensor::from_parts(shape.clone(), out);
        Var::record(xs, value, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&n, &need)| {
                    let piece = need.then(|| narrow_data(g, axis, start, n));
                    start += n;
                    piece
                })
                .collect()
        })
    }

    /// Matrix product: `[M,K] x [K,N]` or batched `[B,M,K] x [B,K,N]`.
    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (None, m, k, n),
            (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => (Some(ba), m, k, n),
            (sa, sb) => return Err(Error::shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        let nb = batch.unwrap_or(1);
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * m * k..],
                (k as isize, 1),
                &b.data()[i * k * n..],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
        let shape = match batch {
            Some(bs) => vec![bs, m, n],
            None => vec![m, n],
        };
        let (av, bv) = (self.value.clone(), other.value.clone());
        Var::record(&[self, other], Tensor::from_parts(shape, out), move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut da = vec![T::zero(); nb * m * k];
                for i in 0..nb {
                    // dA = dC * B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &gd[i * m * n..],
                        (n as isize, 1),
                        &bv.data()[i * k * n..],
                        (1, n as isize),
                        T::zero(),
                        &mut da[i * m * k..],
                        (k as isize, 1),
                    );
                }
                Tensor::from_parts(av.shape().to_vec(), da)
            });
            let gb = needs[1].then(|| {
                let mut db = vec![T::zero(); nb * k * n];
                for i in 0..nb {
                    // dB = A^T * dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &av.data()[i * m * k..],
                        (1, k as isize),
                        &gd[i * m * n..],
                        (n as isize, 1),
                        T::zero(),
                        &mut db[i * k * n..],
                        (n as isize, 1),
                    );
                }
                Tensor::from_parts(bv.shape().to_vec(), db)
            });
            vec![ga, gb]
        })
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&self, axis: usize) -> Result<Var<T>> {
        check_axis(axis, self.value().ndim())?;
        let (outer, n, inner) = axis_split(self.shape(), axis);
        let xd = self.value().data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xd[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let y = std::rc::Rc::new(Tensor::from_parts(self.shape().to_vec(), out));
        let yv = Tensor::clone(&y);
        Var::record(&[self], yv, move |g, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![T::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let dot: T = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        })
    }
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
