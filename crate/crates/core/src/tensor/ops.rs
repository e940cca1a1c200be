use rayon::prelude::*;

use super::graph::{CustomOp, Graph, Node, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
}

pub(crate) enum OpKind<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Sigmoid {
        x: Var,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Reshape {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Real> OpKind<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Sigmoid { .. } => "sigmoid",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::Concat { .. } => "concat",
            OpKind::SliceChannels { .. } => "slice_channels",
            OpKind::Upsample { .. } => "bilinear_upsample",
            OpKind::Mse { .. } => "mse",
            OpKind::Sum { .. } => "sum",
            OpKind::Add { .. } => "add",
            OpKind::Mul { .. } => "mul",
            OpKind::Scale { .. } => "scale",
            OpKind::Reshape { .. } => "reshape",
            OpKind::GlobalAvgPool { .. } => "global_avg_pool",
            OpKind::Custom { op, .. } => op.name(),
        }
    }
}

/// Dot product with eight independent accumulators, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` along one axis for kernel tap `k`, so that
    /// `o * stride + k - pad` stays inside `[0, extent)`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(s)
        };
        let hi = if extent + self.pad > k {
            ((extent - 1 + self.pad - k) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn conv_forward<T: Real>(x: &[T], wt: &[T], b: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, oc)| {
        oc.fill(b[o]);
        for c in 0..g.cin {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &xc[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oc[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            axpy(orow, wv, &row[ix0..ix0 + orow.len()]);
                        } else {
                            for (j, ov) in orow.iter_mut().enumerate() {
                                *ov += wv * row[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_grad_input<T: Real>(gout: &[T], wt: &[T], g: ConvGeom) -> Vec<T> {
    let plane = g.h * g.w;
    let mut gx = vec![T::zero(); g.cin * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(c, gc)| {
        for o in 0..g.cout {
            let go = &gout[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
            for ky in 0..g.kh {
                let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wt[((o * g.cin + c) * g.kh + ky) * g.kw + kx];
                    let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                    if xlo >= xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + kx - g.pad;
                        let xrow = &mut gc[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            axpy(&mut xrow[ix0..ix0 + grow.len()], wv, grow);
                        } else {
                            for (j, gv) in grow.iter().enumerate() {
                                xrow[ix0 + j * g.stride] += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv_grad_weight<T: Real>(gout: &[T], x: &[T], g: ConvGeom) -> Vec<T> {
    let per_out = g.cin * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * per_out];
    gw.par_chunks_mut(per_out).enumerate().for_each(|(o, gwo)| {
        let go = &gout[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
        let mut strided = Vec::new();
        for c in 0..g.cin {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let (ylo, yhi) = g.valid(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let (xlo, xhi) = g.valid(kx, g.w, g.wo);
                    let mut acc = T::zero();
                    if xlo < xhi {
                        let ix0 = xlo * g.stride + kx - g.pad;
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.wo + xlo..oy * g.wo + xhi];
                            let row = &xc[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                acc += dot(grow, &row[ix0..ix0 + grow.len()]);
                            } else {
                                strided.clear();
                                strided.extend((0..grow.len()).map(|j| row[ix0 + j * g.stride]));
                                acc += dot(grow, &strided);
                            }
                        }
                    }
                    gwo[(c * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

/// Align-corners-false source taps for one axis: `(i0, i1, frac)` per output index.
fn upsample_taps(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let ty = upsample_taps(h, f);
    let tx = upsample_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); c * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(ch, oc)| {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let top = (T::one() - lx) * xc[y0 * w + x0] + lx * xc[y0 * w + x1];
                let bot = (T::one() - lx) * xc[y1 * w + x0] + lx * xc[y1 * w + x1];
                oc[oy * wo + ox] = (T::one() - ly) * top + ly * bot;
            }
        }
    });
    out
}

fn upsample_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let ty = upsample_taps(h, f);
    let tx = upsample_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut gx = vec![T::zero(); c * h * w];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(ch, gc)| {
        let go = &g[ch * ho * wo..(ch + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::of(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::of(lx);
                let v = go[oy * wo + ox];
                let top = (T::one() - ly) * v;
                let bot = ly * v;
                gc[y0 * w + x0] += (T::one() - lx) * top;
                gc[y0 * w + x1] += lx * top;
                gc[y1 * w + x0] += (T::one() - lx) * bot;
                gc[y1 * w + x1] += lx * bot;
            }
        }
    });
    gx
}

fn val<T: Real>(nodes: &[Node<T>], v: Var) -> &Tensor<T> {
    &nodes[v.0].value
}

fn needs<T: Real>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

/// Gradient contributions of one node to its inputs.
pub(crate) fn backward<T: Real>(
    op: &OpKind<T>,
    g: &[T],
    out: &Tensor<T>,
    nodes: &[Node<T>],
) -> Vec<(Var, Vec<T>)> {
    let mut res = Vec::new();
    match op {
        OpKind::Leaf => {}
        OpKind::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            let xs = val(nodes, *input);
            let ws = val(nodes, *weight);
            let (cin, h, w) = xs.chw().expect("conv input");
            let sh = ws.shape();
            let geom = ConvGeom {
                cin,
                h,
                w,
                cout: sh[0],
                kh: sh[2],
                kw: sh[3],
                ho: out.shape()[1],
                wo: out.shape()[2],
                stride: *stride,
                pad: *pad,
            };
            if needs(nodes, *input) {
                res.push((*input, conv_grad_input(g, ws.data(), geom)));
            }
            if needs(nodes, *weight) {
                res.push((*weight, conv_grad_weight(g, xs.data(), geom)));
            }
            if needs(nodes, *bias) {
                let plane = geom.ho * geom.wo;
                let gb = g.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                res.push((*bias, gb));
            }
        }
        OpKind::LeakyRelu { x, slope } => {
            let xv = val(nodes, *x).data();
            let gx = xv
                .iter()
                .zip(g)
                .map(|(&v, &gv)| if v >= T::zero() { gv } else { *slope * gv })
                .collect();
            res.push((*x, gx));
        }
        OpKind::Sigmoid { x } => {
            let gx = out
                .data()
                .iter()
                .zip(g)
                .map(|(&y, &gv)| gv * y * (T::one() - y))
                .collect();
            res.push((*x, gx));
        }
        OpKind::InstanceNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (c, h, w) = val(nodes, *x).chw().expect("norm input");
            let n = h * w;
            let gam = val(nodes, *gamma).data();
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let mut gx = vec![T::zero(); c * n];
            let nf = T::of(n as f64);
            for ch in 0..c {
                let gc = &g[ch * n..(ch + 1) * n];
                let xh = &xhat[ch * n..(ch + 1) * n];
                let sum_g: T = gc.iter().copied().sum();
                let sum_gx = dot(gc, xh);
                gb[ch] = sum_g;
                gg[ch] = sum_gx;
                let k = gam[ch] * inv_std[ch] / nf;
                for ((o, &gv), &xv) in gx[ch * n..(ch + 1) * n].iter_mut().zip(gc).zip(xh) {
                    *o = k * (nf * gv - sum_g - xv * sum_gx);
                }
            }
            if needs(nodes, *x) {
                res.push((*x, gx));
            }
            if needs(nodes, *gamma) {
                res.push((*gamma, gg));
            }
            if needs(nodes, *beta) {
                res.push((*beta, gb));
            }
        }
        OpKind::Concat { a, b } => {
            let na = val(nodes, *a).len();
            res.push((*a, g[..na].to_vec()));
            res.push((*b, g[na..].to_vec()));
        }
        OpKind::SliceChannels { x, start } => {
            let xs = val(nodes, *x);
            let (_, h, w) = xs.chw().expect("slice input");
            let mut gx = vec![T::zero(); xs.len()];
            let off = start * h * w;
            gx[off..off + g.len()].copy_from_slice(g);
            res.push((*x, gx));
        }
        OpKind::Upsample { x, factor } => {
            let (c, h, w) = val(nodes, *x).chw().expect("upsample input");
            res.push((*x, upsample_backward(g, c, h, w, *factor)));
        }
        OpKind::Mse { a, b } => {
            let av = val(nodes, *a).data();
            let bv = val(nodes, *b).data();
            let k = g[0] * T::of(2.0 / av.len() as f64);
            let ga: Vec<T> = av.iter().zip(bv).map(|(&p, &q)| k * (p - q)).collect();
            if needs(nodes, *b) {
                res.push((*b, ga.iter().map(|&v| -v).collect()));
            }
            res.push((*a, ga));
        }
        OpKind::Sum { x } => {
            res.push((*x, vec![g[0]; val(nodes, *x).len()]));
        }
        OpKind::Add { a, b } => {
            res.push((*a, g.to_vec()));
            res.push((*b, g.to_vec()));
        }
        OpKind::Mul { a, b } => {
            let av = val(nodes, *a).data();
            let bv = val(nodes, *b).data();
            if needs(nodes, *a) {
                res.push((*a, g.iter().zip(bv).map(|(&gv, &q)| gv * q).collect()));
            }
            if needs(nodes, *b) {
                res.push((*b, g.iter().zip(av).map(|(&gv, &p)| gv * p).collect()));
            }
        }
        OpKind::Scale { x, c } => {
            res.push((*x, g.iter().map(|&v| v * *c).collect()));
        }
        OpKind::Reshape { x } => {
            res.push((*x, g.to_vec()));
        }
        OpKind::GlobalAvgPool { x } => {
            let (c, h, w) = val(nodes, *x).chw().expect("pool input");
            let n = h * w;
            let inv = T::of(1.0 / n as f64);
            let mut gx = Vec::with_capacity(c * n);
            for &gv in g.iter().take(c) {
                gx.extend(std::iter::repeat_n(gv * inv, n));
            }
            res.push((*x, gx));
        }
        OpKind::Custom { inputs, op } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(nodes, *v)).collect();
            let need: Vec<bool> = inputs.iter().map(|v| needs(nodes, *v)).collect();
            for (v, gx) in inputs.iter().zip(op.backward(&ins, out, g, &need)) {
                if let Some(gx) = gx {
                    res.push((*v, gx));
                }
            }
        }
    }
    res
}

fn require_chw<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    t.chw().map_err(|_| {
        Error::invalid(op, format!("expected a [C,H,W] tensor, got {:?}", t.shape()))
    })
}

impl<T: Real> Graph<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    /// Zero-padded 2-D cross-correlation.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.value(input);
        let (cin, h, w) = require_chw("conv2d", xs)?;
        let ws = self.value(weight);
        let &[cout, wcin, kh, kw] = ws.shape() else {
            return Err(Error::invalid(
                "conv2d",
                format!("weight must be [C_out,C_in,kH,kW], got {:?}", ws.shape()),
            ));
        };
        if wcin != cin {
            return Err(Error::shape("conv2d", xs.shape(), ws.shape()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel extents must be odd, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape("conv2d", ws.shape(), self.value(bias).shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!("non-positive output extent for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        };
        let data = conv_forward(xs.data(), ws.data(), self.value(bias).data(), geom);
        let out = Tensor::new(&[cout, ho, wo], data)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            out,
            rg,
            OpKind::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, mode: Activation) -> Result<Var> {
        match mode {
            Activation::LeakyRelu(slope) => self.leaky_relu(x, slope),
            Activation::Sigmoid => Ok(self.sigmoid(x)),
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid(
                "leaky_relu",
                format!("slope must lie in (0,1), got {slope}"),
            ));
        }
        let s = T::of(slope);
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { s * v });
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, OpKind::LeakyRelu { x, slope: s }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, rg, OpKind::Sigmoid { x })
    }

    /// Per-channel normalization with affine `gamma`/`beta`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x);
        let (c, h, w) = require_chw("instance_norm", xs)?;
        let n = h * w;
        if n < 2 {
            return Err(Error::invalid(
                "instance_norm",
                format!("channels need at least 2 pixels, got {h}x{w}"),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("instance_norm", "eps must be positive"));
        }
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(Error::shape("instance_norm", xs.shape(), self.value(p).shape()));
            }
        }
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let mut xhat = vec![T::zero(); c * n];
        let mut inv_std = vec![T::zero(); c];
        let mut out = vec![T::zero(); c * n];
        for ch in 0..c {
            let xc = &xs.data()[ch * n..(ch + 1) * n];
            let mean = xc.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = xc
                .iter()
                .map(|v| (v.f64() - mean) * (v.f64() - mean))
                .sum::<f64>()
                / n as f64;
            let inv = T::of(1.0 / (var + eps).sqrt());
            let m = T::of(mean);
            inv_std[ch] = inv;
            for k in 0..n {
                let xh = (xc[k] - m) * inv;
                xhat[ch * n + k] = xh;
                out[ch * n + k] = xh * gam[ch] + bet[ch];
            }
        }
        let out = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            OpKind::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (c1, h, w) = require_chw("concat", ta)?;
        let (c2, h2, w2) = require_chw("concat", tb)?;
        if (h, w) != (h2, w2) {
            return Err(Error::shape("concat", ta.shape(), tb.shape()));
        }
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        let out = Tensor::new(&[c1 + c2, h, w], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, OpKind::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let (c, h, w) = require_chw("slice_channels", xs)?;
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_channels",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let data = xs.data()[start * h * w..(start + len) * h * w].to_vec();
        let out = Tensor::new(&[len, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, OpKind::SliceChannels { x, start }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("bilinear_upsample", "factor must be >= 1"));
        }
        let xs = self.value(x);
        let (c, h, w) = require_chw("bilinear_upsample", xs)?;
        let out = if factor == 1 {
            xs.clone()
        } else {
            Tensor::new(
                &[c, h * factor, w * factor],
                upsample_forward(xs.data(), c, h, w, factor),
            )?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, OpKind::Upsample { x, factor }))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| {
                let d = (p - q).f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(s / ta.len() as f64));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, OpKind::Mse { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, OpKind::Sum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, OpKind::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, OpKind::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, rg, OpKind::Scale { x, c })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, OpKind::Reshape { x }))
    }

    /// `[C,H,W] -> [C,1,1]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let (c, h, w) = require_chw("global_avg_pool", xs)?;
        let n = h * w;
        let data = xs
            .data()
            .chunks(n)
            .map(|ch| T::of(ch.iter().map(|v| v.f64()).sum::<f64>() / n as f64))
            .collect();
        let out = Tensor::new(&[c, 1, 1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, OpKind::GlobalAvgPool { x }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, Tolerance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], 1.0), false);
        let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, c) in [(3usize, 1usize), (3, 2), (5, 3)] {
            let mut g = Graph::<f32>::new();
            let xs: Tensor<f32> = rand_tensor(&mut rng, &[c, 7, 6]).cast();
            let mut wd = vec![0.0f32; c * c * k * k];
            for ch in 0..c {
                wd[((ch * c + ch) * k + k / 2) * k + k / 2] = 1.0;
            }
            let x = g.leaf(xs.clone(), false);
            let w = g.leaf(Tensor::new(&[c, c, k, k], wd).unwrap(), false);
            let b = g.leaf(Tensor::zeros(&[c]), false);
            let y = g.conv2d(x, w, b, 1, k / 2).unwrap();
            assert_eq!(g.value(y), &xs);
        }
    }

    #[test]
    fn conv_output_extent_with_stride() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 9, 8]), false);
        let w = g.leaf(Tensor::zeros(&[3, 2, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[3, 5, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 4, 4]), false);
        let w = g.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 2]), false);
        let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        assert!(g.conv2d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn conv_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![rand_tensor(&mut rng, &[2, 5, 5]), rand_tensor(&mut rng, &[3, 2, 3, 3]), rand_tensor(&mut rng, &[3])];
        let report = check_gradients(
            &inputs,
            |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                Ok(g.sum(y))
            },
            Tolerance::strict(),
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn activations_by_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], vec![2.0, -2.0, 0.0]), false);
        let y = g.leaky_relu(x, 0.1).unwrap();
        let s = g.sigmoid(x);
        assert_eq!(g.value(y).data()[..2], [2.0, -0.2]);
        assert_eq!(g.value(s).data()[2], 0.5);
        assert!(g.leaky_relu(x, 1.5).is_err());
        assert!(g.activation(x, Activation::LeakyRelu(0.0)).is_err());
    }

    #[test]
    fn sigmoid_gradient_at_one() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        let h = 1e-6;
        let f = |v: f64| 1.0 / (1.0 + (-v).exp());
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!((g.grad(x).unwrap()[0] - fd).abs() < 1e-6);
    }

    #[test]
    fn instance_norm_centers_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(rand_tensor(&mut rng, &[3, 4, 5]), false);
        let gm = g.leaf(Tensor::full(&[3], 1.0), false);
        let bt = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
        for ch in g.value(y).data().chunks(20) {
            let m: f64 = ch.iter().sum::<f64>() / 20.0;
            assert!(m.abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_constant_channel_maps_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::full(&[1, 3, 3], 5.0), false);
        let gm = g.leaf(Tensor::full(&[1], 1.0), false);
        let bt = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.instance_norm(x, gm, bt, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn instance_norm_rejects_single_pixel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 1, 1]), false);
        let gm = g.leaf(Tensor::full(&[2], 1.0), false);
        let bt = g.leaf(Tensor::zeros(&[2]), false);
        assert!(g.instance_norm(x, gm, bt, 1e-5).is_err());
    }

    #[test]
    fn instance_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![rand_tensor(&mut rng, &[2, 4, 4]), rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[2])];
        let report = check_gradients(
            &inputs,
            |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
            Tolerance::strict(),
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn concat_layout_slice_and_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 2]), true);
        let b = g.leaf(Tensor::full(&[1, 2, 2], 1.0), true);
        let c = g.concat(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 2]);
        assert_eq!(g.value(c).data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let sa = g.slice_channels(c, 0, 1).unwrap();
        let sb = g.slice_channels(c, 1, 1).unwrap();
        assert_eq!(g.value(sa), g.value(a));
        assert_eq!(g.value(sb), g.value(b));
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[1, 2, 2]), false);
        let b = g.leaf(Tensor::zeros(&[1, 3, 2]), false);
        let err = g.concat(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 2]") && err.contains("[1, 3, 2]"));
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f32>::new();
        let xs: Tensor<f32> = rand_tensor(&mut rng, &[2, 3, 5]).cast();
        let x = g.leaf(xs.clone(), false);
        let y = g.bilinear_upsample(x, 1).unwrap();
        assert_eq!(g.value(y), &xs);
        let c = g.leaf(Tensor::full(&[1, 3, 3], 0.7f32), false);
        let u = g.bilinear_upsample(c, 4).unwrap();
        assert!(g.value(u).data().iter().all(|v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn upsample_matches_hand_bilinear() {
        // Hand-evaluated oracle: source coordinate (o + 0.5) / 2 - 0.5, clamped at 0.
        let img = [[0.0, 1.0], [2.0, 3.0]];
        let coord = |o: usize| -> (usize, usize, f64) {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(1), s - i0 as f64)
        };
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]), false);
        let y = g.bilinear_upsample(x, 2).unwrap();
        let out = g.value(y).data();
        for oy in 0..4 {
            for ox in 0..4 {
                let (y0, y1, fy) = coord(oy);
                let (x0, x1, fx) = coord(ox);
                let want = img[y0][x0] * (1.0 - fy) * (1.0 - fx)
                    + img[y0][x1] * (1.0 - fy) * fx
                    + img[y1][x0] * fy * (1.0 - fx)
                    + img[y1][x1] * fy * fx;
                assert!((out[oy * 4 + ox] - want).abs() < 1e-12, "({oy},{ox})");
            }
        }
        // Row 0 of the output, written out.
        assert_eq!(&out[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn mse_values_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bs = rand_tensor(&mut rng, &[2, 3, 3]);
        let asx = bs.map(|v| v + 0.1);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(asx.clone(), true);
        let b = g.leaf(bs.clone(), false);
        let same = g.mse(b, b).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let m = g.mse(a, b).unwrap();
        assert!((g.value(m).item() - 0.01).abs() < 1e-12);
        g.backward(m).unwrap();
        let n = asx.len() as f64;
        for ((ga, av), bv) in g.grad(a).unwrap().iter().zip(asx.data()).zip(bs.data()) {
            assert!((ga - 2.0 * (av - bv) / n).abs() < 1e-10);
        }
        let c = g.leaf(Tensor::zeros(&[3]), false);
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn backward_of_linear_form_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs = rand_tensor(&mut rng, &[5]);
        let mut g = Graph::<f64>::new();
        let w = g.leaf(rand_tensor(&mut rng, &[5]), true);
        let x = g.leaf(xs.clone(), false);
        let p = g.mul(w, x).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), xs.data());
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[3], 2.0), true);
        let b = g.leaf(Tensor::full(&[3], 4.0), true);
        let l = g.sum(a);
        let _unused = g.scale(b, 3.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad_tensor(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[3], 2.0), true);
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert!(g.backward(l).is_err());
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::full(&[3], 2.0), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ws = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let xs = rand_tensor(&mut rng, &[1, 6, 6]);
        let ts = rand_tensor(&mut rng, &[2, 6, 6]);
        let grad_of = |ca: f64, cb: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(xs.clone(), false);
            let w = g.leaf(ws.clone(), true);
            let b = g.leaf(Tensor::zeros(&[2]), true);
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let s = g.sigmoid(y);
            let tv = g.constant(ts.clone());
            let l1 = g.mse(s, tv).unwrap();
            let l2 = g.sum(y);
            let l1 = g.scale(l1, ca);
            let l2 = g.scale(l2, cb);
            let l = g.add(l1, l2).unwrap();
            g.backward(l).unwrap();
            g.grad(w).unwrap().to_vec()
        };
        let (ga, gb, gab) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(0.7, -1.3));
        for k in 0..ga.len() {
            assert!((gab[k] - (0.7 * ga[k] - 1.3 * gb[k])).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_and_reshape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let inputs = vec![rand_tensor(&mut rng, &[3, 4, 2])];
        let report = check_gradients(
            &inputs,
            |g, v| {
                let p = g.global_avg_pool(v[0])?;
                let r = g.reshape(p, &[3])?;
                let s = g.sigmoid(r);
                Ok(g.scale(s, 2.0))
            },
            Tolerance::strict(),
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
