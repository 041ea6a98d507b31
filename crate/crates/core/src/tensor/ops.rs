//! Elementwise arithmetic, reductions, shape manipulation and matrix products.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::{strides, Real, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` viewed at rank `out.len()`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < numel {
        let base_a: usize = (0..rank - 1).map(|d| idx[d] * sa[d]).sum();
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * sb[d]).sum();
        for j in 0..inner {
            f(o + j, base_a + j * ia_step, base_b + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn sum_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let src = g.data();
    let dst = out.data_mut();
    for_each_broadcast(g.shape(), &st, &st, |o, t, _| dst[t] += src[o]);
    out
}

fn binary_values<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut res = Tensor::zeros(&out);
    let (ad, bd) = (a.data(), b.data());
    let rd = res.data_mut();
    for_each_broadcast(&out, &sa, &sb, |o, i, j| rd[o] = f(ad[i], bd[j]));
    Ok(res)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, rhs: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let value = match op {
            BinOp::Add => binary_values(&av, &bv, |x, y| x + y)?,
            BinOp::Sub => binary_values(&av, &bv, |x, y| x - y)?,
            BinOp::Mul => binary_values(&av, &bv, |x, y| x * y)?,
            BinOp::Div => binary_values(&av, &bv, |x, y| x / y)?,
        };
        Ok(self.tape.record(
            &[self, rhs],
            value,
            Box::new(move |g| {
                let (ga, gb) = match op {
                    BinOp::Add => (g.clone(), g.clone()),
                    BinOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinOp::Mul => (
                        binary_values(g, &bv, |x, y| x * y).unwrap(),
                        binary_values(g, &av, |x, y| x * y).unwrap(),
                    ),
                    BinOp::Div => {
                        let ga = binary_values(g, &bv, |x, y| x / y).unwrap();
                        let q = binary_values(&av, &bv, |x, y| x / (y * y)).unwrap();
                        let gb = binary_values(g, &q, |x, y| -x * y).unwrap();
                        (ga, gb)
                    }
                };
                vec![
                    Some(sum_to_shape(&ga, av.shape())),
                    Some(sum_to_shape(&gb, bv.shape())),
                ]
            }),
        ))
    }

    pub fn try_add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn try_sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn try_mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn try_div(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, BinOp::Div)
    }

    /// Elementwise map with derivative `df(x, y)` given input `x` and output `y`.
    pub fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.tape.record_shared(
            &[self],
            y,
            Box::new(move |g| {
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(y_keep.data())
                    .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                    .collect();
                vec![Some(Tensor::new(x.shape(), data).unwrap())]
            }),
        )
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(T::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(T::ln, |x, _| x.recip())
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(T::sqrt, |_, y| T::of(0.5) / y)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(T::tanh, |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(self) -> Var<'t, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Clamp to `[lo, hi]`; gradient passes inside the closed interval only.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(
            &[self],
            Tensor::scalar(x.sum_all()),
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::of(self.numel() as f64);
        self.sum().scale(n.recip())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let value = (*x).clone().reshaped(shape)?;
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |g| vec![Some(g.clone().reshaped(&old).unwrap())]),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {:?} for {:?}", perm, x.shape()));
        }
        let value = permute_values(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape.record(
            &[self],
            value,
            Box::new(move |g| vec![Some(permute_values(g, &inverse))]),
        ))
    }

    /// Sub-range `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(shape_err!(
                "slice {}..{} on axis {} out of range for {:?}",
                start,
                end,
                axis,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        Ok(self.tape.record(
            &[self],
            Tensor::new(&out_shape, data)?,
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    let dst = (o * shape[axis] + start) * inner;
                    let src = o * len * inner;
                    gxd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Matrix product. Rank-2 operands are treated as a batch of one; rank-3
    /// operands multiply batch-wise. `trans_a`/`trans_b` transpose the last two axes.
    pub fn matmul_ex(self, rhs: Var<'t, T>, trans_a: bool, trans_b: bool) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), rhs.value());
        let dims = MatmulDims::new(av.shape(), bv.shape(), trans_a, trans_b)?;
        let mut out = Tensor::zeros(&dims.out_shape);
        dims.run(av.data(), trans_a, bv.data(), trans_b, out.data_mut());
        Ok(self.tape.record(
            &[self, rhs],
            out,
            Box::new(move |g| {
                let mut ga = Tensor::zeros(av.shape());
                let mut gb = Tensor::zeros(bv.shape());
                let d = &dims;
                for batch in 0..d.batch {
                    let gs = &g.data()[batch * d.m * d.n..(batch + 1) * d.m * d.n];
                    let asl = &av.data()[batch * d.m * d.k..(batch + 1) * d.m * d.k];
                    let bsl = &bv.data()[batch * d.k * d.n..(batch + 1) * d.k * d.n];
                    let gas = &mut ga.data_mut()[batch * d.m * d.k..(batch + 1) * d.m * d.k];
                    // op(B) strides as a k×n matrix
                    let ob = if trans_b { (1, d.k as isize) } else { (d.n as isize, 1) };
                    let oa = if trans_a { (1, d.m as isize) } else { (d.k as isize, 1) };
                    let g_rm = (d.n as isize, 1);
                    if trans_a {
                        // dA (k×m) = op(B)·dCᵀ
                        T::gemm(d.k, d.n, d.m, bsl, ob, gs, (1, d.n as isize), T::zero(), gas, (d.m as isize, 1));
                    } else {
                        // dA (m×k) = dC·op(B)ᵀ
                        T::gemm(d.m, d.n, d.k, gs, g_rm, bsl, (ob.1, ob.0), T::zero(), gas, (d.k as isize, 1));
                    }
                    let gbs = &mut gb.data_mut()[batch * d.k * d.n..(batch + 1) * d.k * d.n];
                    if trans_b {
                        // dB (n×k) = dCᵀ·op(A)
                        T::gemm(d.n, d.m, d.k, gs, (1, d.n as isize), asl, oa, T::zero(), gbs, (d.k as isize, 1));
                    } else {
                        // dB (k×n) = op(A)ᵀ·dC
                        T::gemm(d.k, d.m, d.n, asl, (oa.1, oa.0), gs, g_rm, T::zero(), gbs, (d.n as isize, 1));
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_ex(rhs, false, false)
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(y);
        let yk = Rc::clone(&y);
        self.tape.record_shared(
            &[self],
            y,
            Box::new(move |g| {
                let mut gx = Tensor::zeros(yk.shape());
                let rows = yk.data().chunks(d.max(1)).zip(g.data().chunks(d.max(1)));
                for ((yr, gr), out) in rows.zip(gx.data_mut().chunks_mut(d.max(1))) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(vars: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = vars.first().ok_or_else(|| invalid!("concat of zero tensors"))?;
    let values: Vec<Rc<Tensor<T>>> = vars.iter().map(|v| v.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(shape_err!("concat axis {} out of range for {:?}", axis, base));
    }
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(shape_err!("concat mismatch: {:?} vs {:?} on axis {}", base, s, axis));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &e) in values.iter().zip(&extents) {
            data.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(first.tape.record(
        vars,
        Tensor::new(&out_shape, data)?,
        Box::new(move |g| {
            let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            let mut src = 0;
            for o in 0..outer {
                for (gt, &e) in grads.iter_mut().zip(&extents) {
                    let n = e * inner;
                    gt.data_mut()[o * n..(o + 1) * n].copy_from_slice(&g.data()[src..src + n]);
                    src += n;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

pub(crate) fn permute_values<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Tensor::zeros(&out_shape);
    let zero = vec![0; out_shape.len()];
    let xd = x.data();
    let od = out.data_mut();
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| od[o] = xd[i]);
    out
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatmulDims {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let rank = a.len();
        if rank != b.len() || !(rank == 2 || rank == 3) {
            return Err(shape_err!(
                "matmul needs matching rank-2 or rank-3 operands, got {:?} and {:?}",
                a,
                b
            ));
        }
        let batch = if rank == 3 { a[0] } else { 1 };
        if rank == 3 && b[0] != batch {
            return Err(shape_err!("matmul batch mismatch: {:?} vs {:?}", a, b));
        }
        let (ar, ac) = (a[rank - 2], a[rank - 1]);
        let (br, bc) = (b[rank - 2], b[rank - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!("matmul inner dimension mismatch: {:?} x {:?}", a, b));
        }
        let out_shape = if rank == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(Self {
            batch,
            m,
            k,
            n,
            out_shape,
        })
    }

    fn run<T: Real>(&self, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let sa = if ta { (1, m as isize) } else { (k as isize, 1) };
        let sb = if tb { (1, k as isize) } else { (n as isize, 1) };
        for batch in 0..self.batch {
            T::gemm(
                m,
                k,
                n,
                &a[batch * m * k..(batch + 1) * m * k],
                sa,
                &b[batch * k * n..(batch + 1) * k * n],
                sb,
                T::zero(),
                &mut c[batch * m * n..(batch + 1) * m * n],
                (n as isize, 1),
            );
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

macro_rules! impl_operator {
    ($trait:ident, $method:ident, $try:ident) => {
        impl<'t, T: Real> $trait for Var<'t, T> {
            type Output = Var<'t, T>;

            /// Panics when the operand shapes do not broadcast.
            fn $method(self, rhs: Var<'t, T>) -> Var<'t, T> {
                self.$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

impl_operator!(Add, add, try_add);
impl_operator!(Sub, sub, try_sub);
impl_operator!(Mul, mul, try_mul);
impl_operator!(Div, div, try_div);

impl<'t, T: Real> Neg for Var<'t, T> {
    type Output = Var<'t, T>;

    fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }
}
