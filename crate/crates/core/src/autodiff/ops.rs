//! Differentiable operations. Every op here has a finite-difference test in
//! `tests` below.

use std::rc::Rc;

use super::tape::Var;
use super::{Real, Tape, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Output spatial size of a convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

struct ConvGeom {
    ci: usize,
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

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (k, p) = (self.k, self.ho * self.wo);
        let mut cols = vec![T::zero(); self.ci * k * k * p];
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = ci * self.h * self.w + iy as usize * self.w;
                        let dst = row + oy * self.wo;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                cols[dst + ox] = x[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (k, p) = (self.k, self.ho * self.wo);
        let mut x = vec![T::zero(); self.ci * self.h * self.w];
        for ci in 0..self.ci {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + ky) * k + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = ci * self.h * self.w + iy as usize * self.w;
                        let src = row + oy * self.wo;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                x[dst + ix as usize] += cols[src + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<T: Real> Tape<T> {
    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>, Tensor<T>)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err(op, &av.shape, &bv.shape));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape.clone(), data);
        Ok((av, bv, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (_, _, out) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(
            "add",
            &[a, b],
            out,
            Box::new(move |g, s| {
                s.accumulate(a, &g.data);
                s.accumulate(b, &g.data);
            }),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (_, _, out) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(
            "sub",
            &[a, b],
            out,
            Box::new(move |g, s| {
                s.accumulate(a, &g.data);
                let neg: Vec<T> = g.data.iter().map(|&v| -v).collect();
                s.accumulate(b, &neg);
            }),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv, out) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(
            "mul",
            &[a, b],
            out,
            Box::new(move |g, s| {
                if s.wants(a) {
                    let ga: Vec<T> = g.data.iter().zip(&bv.data).map(|(&g, &y)| g * y).collect();
                    s.accumulate(a, &ga);
                }
                if s.wants(b) {
                    let gb: Vec<T> = g.data.iter().zip(&av.data).map(|(&g, &x)| g * x).collect();
                    s.accumulate(b, &gb);
                }
            }),
        ))
    }

    fn unary(
        &self,
        op: &'static str,
        x: Var,
        f: impl Fn(T) -> T,
        // derivative given (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| f(v)).collect());
        let yv = out.data.clone();
        self.push(
            op,
            &[x],
            out,
            Box::new(move |g, s| {
                let gx: Vec<T> = g
                    .data
                    .iter()
                    .zip(xv.data.iter().zip(&yv))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                s.accumulate(x, &gx);
            }),
        )
    }

    pub fn scale(&self, x: Var, k: T) -> Var {
        self.unary("scale", x, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&self, x: Var, k: T) -> Var {
        self.unary("add_scalar", x, move |v| v + k, |_, _| T::one())
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&self, x: Var) -> Var {
        self.unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            "abs",
            x,
            |v| v.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary("tanh", x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            "clamp",
            x,
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (shape `[C, ...]`).
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = bv.len();
        if xv.shape.first() != Some(&c) || bv.shape.len() != 1 {
            return Err(shape_err("add_channel_bias", &xv.shape, &bv.shape));
        }
        let inner = xv.len() / c.max(1);
        let mut data = xv.data.clone();
        for (ch, chunk) in data.chunks_mut(inner.max(1)).enumerate().take(c) {
            for v in chunk {
                *v += bv.data[ch];
            }
        }
        let out = Tensor::new(xv.shape.clone(), data);
        Ok(self.push(
            "add_channel_bias",
            &[x, b],
            out,
            Box::new(move |g, s| {
                s.accumulate(x, &g.data);
                if s.wants(b) {
                    let gb: Vec<T> = g
                        .data
                        .chunks(inner.max(1))
                        .take(c)
                        .map(|ch| ch.iter().copied().sum())
                        .collect();
                    s.accumulate(b, &gb);
                }
            }),
        ))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(shape_err("matmul", &av.shape, &bv.shape));
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut c = vec![T::zero(); m * n];
        T::gemm(m, k, n, &av.data, false, &bv.data, false, &mut c, false);
        Ok(self.push(
            "matmul",
            &[a, b],
            Tensor::new(vec![m, n], c),
            Box::new(move |g, s| {
                if s.wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g.data, false, &bv.data, true, &mut ga, false);
                    s.accumulate(a, &ga);
                }
                if s.wants(b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, &av.data, true, &g.data, false, &mut gb, false);
                    s.accumulate(b, &gb);
                }
            }),
        ))
    }

    /// 2D convolution of `x: [Ci, H, W]` with `w: [Co, Ci, k, k]`, zero padding.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape.len() != 3
            || wv.shape.len() != 4
            || wv.shape[1] != xv.shape[0]
            || wv.shape[2] != wv.shape[3]
            || stride == 0
            || xv.shape[1] + 2 * pad < wv.shape[2]
            || xv.shape[2] + 2 * pad < wv.shape[2]
        {
            return Err(shape_err("conv2d", &xv.shape, &wv.shape));
        }
        let (co, k) = (wv.shape[0], wv.shape[2]);
        let geom = ConvGeom {
            ci: xv.shape[0],
            h: xv.shape[1],
            w: xv.shape[2],
            k,
            stride,
            pad,
            ho: conv_out_size(xv.shape[1], k, stride, pad),
            wo: conv_out_size(xv.shape[2], k, stride, pad),
        };
        let kk = geom.ci * k * k;
        let p = geom.ho * geom.wo;
        let cols: Rc<Vec<T>> = if geom.is_pointwise() {
            Rc::new(xv.data.clone())
        } else {
            Rc::new(geom.im2col(&xv.data))
        };
        let mut out = vec![T::zero(); co * p];
        T::gemm(co, kk, p, &wv.data, false, &cols, false, &mut out, false);
        let shape = vec![co, geom.ho, geom.wo];
        Ok(self.push(
            "conv2d",
            &[x, w],
            Tensor::new(shape, out),
            Box::new(move |g, s| {
                if s.wants(w) {
                    let mut gw = vec![T::zero(); co * kk];
                    T::gemm(co, p, kk, &g.data, false, &cols, true, &mut gw, false);
                    s.accumulate(w, &gw);
                }
                if s.wants(x) {
                    let mut gcols = vec![T::zero(); kk * p];
                    T::gemm(kk, co, p, &wv.data, true, &g.data, false, &mut gcols, false);
                    if geom.is_pointwise() {
                        s.accumulate(x, &gcols);
                    } else {
                        s.accumulate(x, &geom.col2im(&gcols));
                    }
                }
            }),
        ))
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || factor == 0 {
            return Err(Error::Shape(format!(
                "upsample_nearest: expected [C, H, W] and factor > 0, got {:?} and {factor}",
                xv.shape
            )));
        }
        let (c, h, w) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                let src = ch * h * w + (y / factor) * w;
                let dst = ch * ho * wo + y * wo;
                for xo in 0..wo {
                    out[dst + xo] = xv.data[src + xo / factor];
                }
            }
        }
        Ok(self.push(
            "upsample_nearest",
            &[x],
            Tensor::new(vec![c, ho, wo], out),
            Box::new(move |g, s| {
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        let dst = ch * h * w + (y / factor) * w;
                        let src = ch * ho * wo + y * wo;
                        for xo in 0..wo {
                            gx[dst + xo / factor] += g.data[src + xo];
                        }
                    }
                }
                s.accumulate(x, &gx);
            }),
        ))
    }

    /// Group normalization of `[C, H, W]` with per-channel affine parameters.
    pub fn group_norm(&self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.shape.len() != 3
            || groups == 0
            || xv.shape[0] % groups != 0
            || gv.shape != [xv.shape[0]]
            || bv.shape != [xv.shape[0]]
        {
            return Err(Error::Shape(format!(
                "group_norm: input {:?}, gamma {:?}, beta {:?}, groups {groups}",
                xv.shape, gv.shape, bv.shape
            )));
        }
        let c = xv.shape[0];
        let hw = xv.shape[1] * xv.shape[2];
        let cpg = c / groups;
        let n = T::from_f((cpg * hw) as f64);
        let eps = T::from_f(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); groups];
        for gi in 0..groups {
            let range = gi * cpg * hw..(gi + 1) * cpg * hw;
            let seg = &xv.data[range.clone()];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            for (o, &v) in xhat[range].iter_mut().zip(seg) {
                *o = (v - mean) * is;
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                out[i] = xhat[i] * gv.data[ch] + bv.data[ch];
            }
        }
        Ok(self.push(
            "group_norm",
            &[x, gamma, beta],
            Tensor::new(xv.shape.clone(), out),
            Box::new(move |g, s| {
                if s.wants(beta) {
                    let gb: Vec<T> = g.data.chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                    s.accumulate(beta, &gb);
                }
                if s.wants(gamma) {
                    let gg: Vec<T> = g
                        .data
                        .chunks(hw)
                        .zip(xhat.chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    s.accumulate(gamma, &gg);
                }
                if s.wants(x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for gi in 0..groups {
                        let lo = gi * cpg * hw;
                        let hi = lo + cpg * hw;
                        let dxhat: Vec<T> = (lo..hi).map(|i| g.data[i] * gv.data[i / hw]).collect();
                        let m1 = dxhat.iter().copied().sum::<T>() / n;
                        let m2 = dxhat.iter().zip(&xhat[lo..hi]).map(|(&d, &xh)| d * xh).sum::<T>() / n;
                        for (j, i) in (lo..hi).enumerate() {
                            gx[i] = inv_std[gi] * (dxhat[j] - m1 - xhat[i] * m2);
                        }
                    }
                    s.accumulate(x, &gx);
                }
            }),
        ))
    }

    /// Concatenates tensors along their first dimension.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<_> = xs.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::Shape("concat_channels: no inputs".into()))?;
        let rest = &first.shape[1..];
        for v in &vals[1..] {
            if v.shape.is_empty() || v.shape[1..] != *rest {
                return Err(shape_err("concat_channels", &first.shape, &v.shape));
            }
        }
        let total: usize = vals.iter().map(|v| v.shape[0]).sum();
        let mut shape = first.shape.clone();
        shape[0] = total;
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
        let mut lens = Vec::with_capacity(vals.len());
        for v in &vals {
            data.extend_from_slice(&v.data);
            lens.push(v.len());
        }
        let ins = xs.to_vec();
        Ok(self.push(
            "concat_channels",
            xs,
            Tensor::new(shape, data),
            Box::new(move |g, s| {
                let mut off = 0;
                for (v, &l) in ins.iter().zip(&lens) {
                    s.accumulate(*v, &g.data[off..off + l]);
                    off += l;
                }
            }),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.len() {
            return Err(shape_err("reshape", &xv.shape, shape));
        }
        Ok(self.push(
            "reshape",
            &[x],
            Tensor::new(shape.to_vec(), xv.data.clone()),
            Box::new(move |g, s| s.accumulate(x, &g.data)),
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.len();
        let total = xv.data.iter().copied().sum();
        self.push(
            "sum",
            &[x],
            Tensor::scalar(total),
            Box::new(move |g, s| s.accumulate(x, &vec![g.data[0]; n])),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let total = self.sum(x);
        self.scale(total, T::one() / T::from_f(n.max(1) as f64))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
