//! Convolution, normalization, resampling and attention.

use super::{Real, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// Geometry of a square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME: Conv2dSpec = Conv2dSpec {
        stride: 1,
        padding: 1,
    };
    pub const POINTWISE: Conv2dSpec = Conv2dSpec {
        stride: 1,
        padding: 0,
    };
    pub const DOWN2: Conv2dSpec = Conv2dSpec {
        stride: 2,
        padding: 1,
    };

    /// Output extent along one axis (floor division over the padded input).
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(invalid!("conv stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(shape_err!(
                "kernel {} larger than padded input extent {}",
                kernel,
                padded
            ));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox·s + kx - p` is in range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = p.saturating_sub(kx).div_ceil(s).min(self.wo);
        // largest ox with ox·s + kx - p <= w - 1
        let hi = if self.w + p > kx { ((self.w + p - kx - 1) / s + 1).min(self.wo) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let dst = &mut cols[row..row + hw];
                    for oy in 0..self.ho {
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= self.h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[(iy - p) * self.w..(iy - p + 1) * self.w];
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        let start = lo * s + kx - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (d, &v) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(s)) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let hw = self.ho * self.wo;
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_cols(kx);
                    let row = ((ci * k + ky) * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    for oy in 0..self.ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= self.h {
                            continue;
                        }
                        let line = &mut plane[(iy - p) * self.w..(iy - p + 1) * self.w];
                        let from = &src[oy * self.wo + lo..oy * self.wo + hi];
                        let start = lo * s + kx - p;
                        for (d, &v) in line[start..].iter_mut().step_by(s).zip(from) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// 2D cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,k,k]` plus per-channel bias.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, spec: Conv2dSpec) -> Result<Var<'t, T>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input and weight, got {:?} and {:?}", xs, ws));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 || k % 2 == 0 {
            return Err(shape_err!("conv2d kernel must be square and odd, got {}x{}", k, k2));
        }
        if wcin != cin {
            return Err(shape_err!("conv2d input has {} channels, weight expects {}", cin, wcin));
        }
        if b.shape() != [cout] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", b.shape(), cout));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.padding,
            ho: spec.output_extent(h, k)?,
            wo: spec.output_extent(wd, k)?,
        };
        let ck = cin * k * k;
        let hw = geom.ho * geom.wo;
        let mut out = Tensor::zeros(&[n, cout, geom.ho, geom.wo]);
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * hw] };
        for bi in 0..n {
            let xn = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols_ref: &[T] = if geom.is_pointwise() {
                xn
            } else {
                geom.im2col(xn, &mut cols);
                &cols
            };
            let on = &mut out.data_mut()[bi * cout * hw..(bi + 1) * cout * hw];
            for (c, row) in on.chunks_mut(hw).enumerate() {
                row.fill(b.data()[c]);
            }
            T::gemm(cout, ck, hw, w.data(), (ck as isize, 1), cols_ref, (hw as isize, 1), T::one(), on, (hw as isize, 1));
        }

        Ok(self.tape.record(
            &[self, weight, bias],
            out,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(x.shape());
                let mut dw = Tensor::zeros(w.shape());
                let mut db = Tensor::zeros(&[cout]);
                let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * hw] };
                let mut dcols = vec![T::zero(); ck * hw];
                for bi in 0..n {
                    let gn = &g.data()[bi * cout * hw..(bi + 1) * cout * hw];
                    for (c, row) in gn.chunks(hw).enumerate() {
                        db.data_mut()[c] += row.iter().copied().sum::<T>();
                    }
                    let xn = &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    let cols_ref: &[T] = if geom.is_pointwise() {
                        xn
                    } else {
                        geom.im2col(xn, &mut cols);
                        &cols
                    };
                    // dW += g · colsᵀ
                    T::gemm(cout, hw, ck, gn, (hw as isize, 1), cols_ref, (1, hw as isize), T::one(), dw.data_mut(), (ck as isize, 1));
                    let dxn = &mut dx.data_mut()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                    if geom.is_pointwise() {
                        // dx = Wᵀ · g written straight into the input gradient
                        T::gemm(ck, cout, hw, w.data(), (1, ck as isize), gn, (hw as isize, 1), T::zero(), dxn, (hw as isize, 1));
                    } else {
                        T::gemm(ck, cout, hw, w.data(), (1, ck as isize), gn, (hw as isize, 1), T::zero(), &mut dcols, (hw as isize, 1));
                        geom.col2im(&dcols, dxn);
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// Group normalization of `[N,C,H,W]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(self, groups: usize, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("group_norm expects [N,C,H,W], got {:?}", xs));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(invalid!("{} channels are not divisible into {} groups", c, groups));
        }
        if eps <= T::zero() {
            return Err(invalid!("group_norm eps must be positive"));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(shape_err!("group_norm affine shapes {:?}/{:?}, expected [{}]", gv.shape(), bv.shape(), c));
        }
        let hw = xs[2] * xs[3];
        let cpg = c / groups;
        let m = cpg * hw;
        let mut xhat = Tensor::zeros(&xs);
        let mut rstd = vec![T::zero(); n * groups];
        let mut out = Tensor::zeros(&xs);
        for bi in 0..n {
            for gi in 0..groups {
                let base = (bi * c + gi * cpg) * hw;
                let seg = &x.data()[base..base + m];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
                let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m as f64;
                let r = 1.0 / (var + eps.as_f64()).sqrt();
                rstd[bi * groups + gi] = T::of(r);
                let xh = &mut xhat.data_mut()[base..base + m];
                for (d, &v) in xh.iter_mut().zip(seg) {
                    *d = T::of((v.as_f64() - mean) * r);
                }
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let (ga, be) = (gv.data()[ch], bv.data()[ch]);
                    let off = base + ci * hw;
                    for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(&xhat.data()[off..off + hw]) {
                        *o = v * ga + be;
                    }
                }
            }
        }
        Ok(self.tape.record(
            &[self, gamma, beta],
            out,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&xs);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let mut dxhat = vec![T::zero(); m];
                for bi in 0..n {
                    for gi in 0..groups {
                        let base = (bi * c + gi * cpg) * hw;
                        let xh = &xhat.data()[base..base + m];
                        let gs = &g.data()[base..base + m];
                        for ci in 0..cpg {
                            let ch = gi * cpg + ci;
                            let r = ci * hw..(ci + 1) * hw;
                            let (mut sg, mut sgx) = (T::zero(), T::zero());
                            for (&gvv, &xv) in gs[r.clone()].iter().zip(&xh[r.clone()]) {
                                sg += gvv;
                                sgx += gvv * xv;
                            }
                            dbeta.data_mut()[ch] += sg;
                            dgamma.data_mut()[ch] += sgx;
                            let ga = gv.data()[ch];
                            for (d, &gvv) in dxhat[r.clone()].iter_mut().zip(&gs[r]) {
                                *d = gvv * ga;
                            }
                        }
                        let mf = T::of(m as f64);
                        let mean_d: T = dxhat.iter().copied().sum::<T>() / mf;
                        let mean_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / mf;
                        let rs = rstd[bi * groups + gi];
                        for ((o, &d), &xv) in dx.data_mut()[base..base + m].iter_mut().zip(&dxhat).zip(xh) {
                            *o = rs * (d - mean_d - xv * mean_dx);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Nearest-neighbour resize of `[N,C,H,W]` to `[N,C,out_h,out_w]`.
    pub fn resize_nearest(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize_nearest expects [N,C,H,W] and positive size, got {:?}", xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let map_y: Vec<usize> = (0..out_h).map(|y| y * h / out_h).collect();
        let map_x: Vec<usize> = (0..out_w).map(|v| v * w / out_w).collect();
        let mut out = Tensor::zeros(&[xs[0], xs[1], out_h, out_w]);
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (y, &sy) in map_y.iter().enumerate() {
                for (xx, &sx) in map_x.iter().enumerate() {
                    dst[y * out_w + xx] = src[sy * w + sx];
                }
            }
        }
        Ok(self.tape.record(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&xs);
                for p in 0..nc {
                    let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (y, &sy) in map_y.iter().enumerate() {
                        for (xx, &sx) in map_x.iter().enumerate() {
                            dst[sy * w + sx] += src[y * out_w + xx];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Bilinear resize of `[N,C,H,W]` using pixel-center alignment.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let xs = x.shape().to_vec();
        if xs.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize_bilinear expects [N,C,H,W] and positive size, got {:?}", xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let taps_y = bilinear_taps::<T>(h, out_h);
        let taps_x = bilinear_taps::<T>(w, out_w);
        let mut out = Tensor::zeros(&[xs[0], xs[1], out_h, out_w]);
        for p in 0..nc {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (y, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[y * out_w + xx] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Ok(self.tape.record(
            &[self],
            out,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&xs);
                for p in 0..nc {
                    let src = &g.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
                    let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                    for (y, &(y0, y1, fy)) in taps_y.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                            let gv = src[y * out_w + xx];
                            let (a, b) = (gv * (T::one() - fy), gv * fy);
                            dst[y0 * w + x0] += a * (T::one() - fx);
                            dst[y0 * w + x1] += a * fx;
                            dst[y1 * w + x0] += b * (T::one() - fx);
                            dst[y1 * w + x1] += b * fx;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::of(src - i0 as f64))
        })
        .collect()
}

/// `softmax(q·kᵀ/√D)·v` for `[N,T,D]` operands.
pub fn scaled_dot_attention<'t, T: Real>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    let qs = q.shape();
    if qs.len() != 3 || k.shape() != qs || v.shape() != qs {
        return Err(shape_err!(
            "attention expects matching [N,T,D] operands, got {:?}, {:?}, {:?}",
            qs,
            k.shape(),
            v.shape()
        ));
    }
    let scale = T::of(1.0 / (qs[2] as f64).sqrt());
    q.matmul_ex(k, false, true)?.scale(scale).softmax().matmul(v)
}
