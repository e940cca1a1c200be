//! Lanczos-3 downsampling and the Catmull-Rom bicubic baseline upsampler.
//!
//! Both resamplers use half-pixel sample centers and clamp-to-edge indexing.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Lanczos window with `a = 3`. Exactly zero at nonzero integers and outside `|x| < 3`.
pub fn lanczos_kernel(x: f64) -> f64 {
    let a = x.abs();
    if a == 0.0 {
        return 1.0;
    }
    if a >= 3.0 || a.fract() == 0.0 {
        return 0.0;
    }
    let px = PI * a;
    3.0 * px.sin() * (px / 3.0).sin() / (px * px)
}

/// 1-D decimation by an integer factor, stored as sparse normalized taps.
#[derive(Clone, Debug, PartialEq)]
pub struct DownsampleOperator {
    factor: usize,
    in_extent: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl DownsampleOperator {
    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn in_extent(&self) -> usize {
        self.in_extent
    }

    pub fn out_extent(&self) -> usize {
        self.taps.len()
    }

    /// `(source index, weight)` pairs of output pixel `j`, sorted by index.
    pub fn taps(&self, j: usize) -> &[(usize, f64)] {
        &self.taps[j]
    }

    /// Dense `out_extent x in_extent` matrix.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.taps
            .iter()
            .map(|row| {
                let mut dense = vec![0.0; self.in_extent];
                for &(i, w) in row {
                    dense[i] += w;
                }
                dense
            })
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|row| row.iter().map(|&(i, w)| w * x[i]).sum())
            .collect()
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.in_extent];
        for (row, &yv) in self.taps.iter().zip(y) {
            for &(i, w) in row {
                x[i] += w * yv;
            }
        }
        x
    }
}

pub fn build_downsample(t: usize, in_extent: usize) -> Result<DownsampleOperator> {
    if t == 0 || in_extent == 0 {
        return Err(Error::invalid(
            "build_downsample",
            "factor and extent must be positive",
        ));
    }
    if in_extent % t != 0 {
        return Err(Error::NotDivisible {
            op: "build_downsample",
            extent: in_extent,
            multiple: t,
        });
    }
    let tf = t as f64;
    let last = in_extent as isize - 1;
    let taps = (0..in_extent / t)
        .map(|j| {
            let center = (j as f64 + 0.5) * tf - 0.5;
            let lo = (center - 3.0 * tf).floor() as isize;
            let hi = (center + 3.0 * tf).ceil() as isize;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let w = lanczos_kernel((i as f64 - center) / tf);
                if w == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, last) as usize;
                match row.iter_mut().find(|(k, _)| *k == idx) {
                    Some(entry) => entry.1 += w,
                    None => row.push((idx, w)),
                }
            }
            row.sort_by_key(|&(k, _)| k);
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            row.iter_mut().for_each(|e| e.1 /= total);
            row
        })
        .collect();
    Ok(DownsampleOperator {
        factor: t,
        in_extent,
        taps,
    })
}

/// Separable Lanczos pair for a `[C,H,W]` shape.
#[derive(Clone, Debug)]
struct Separable<T> {
    c: usize,
    h: usize,
    w: usize,
    rows: Vec<Vec<(usize, T)>>,
    cols: Vec<Vec<(usize, T)>>,
}

impl<T: Real> Separable<T> {
    fn new(shape: (usize, usize, usize), t: usize) -> Result<Self> {
        let (c, h, w) = shape;
        for extent in [h, w] {
            if t == 0 || extent % t != 0 {
                return Err(Error::NotDivisible {
                    op: "lanczos_downsample",
                    extent,
                    multiple: t.max(1),
                });
            }
        }
        let cast = |op: DownsampleOperator| -> Vec<Vec<(usize, T)>> {
            op.taps
                .into_iter()
                .map(|r| r.into_iter().map(|(i, w)| (i, T::of(w))).collect())
                .collect()
        };
        Ok(Separable {
            c,
            h,
            w,
            rows: cast(build_downsample(t, w)?),
            cols: cast(build_downsample(t, h)?),
        })
    }

    fn out_shape(&self) -> [usize; 3] {
        [self.c, self.cols.len(), self.rows.len()]
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (self.cols.len(), self.rows.len());
        let mut out = vec![T::zero(); self.c * oh * ow];
        out.par_chunks_mut(oh * ow)
            .zip(x.par_chunks(h * w))
            .for_each(|(oc, xc)| {
                let mut tmp = vec![T::zero(); h * ow];
                for y in 0..h {
                    let row = &xc[y * w..(y + 1) * w];
                    for (j, taps) in self.rows.iter().enumerate() {
                        tmp[y * ow + j] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
                    }
                }
                for (jy, taps) in self.cols.iter().enumerate() {
                    let orow = &mut oc[jy * ow..(jy + 1) * ow];
                    for &(i, wt) in taps {
                        for (o, &v) in orow.iter_mut().zip(&tmp[i * ow..(i + 1) * ow]) {
                            *o += wt * v;
                        }
                    }
                }
            });
        out
    }

    fn transpose(&self, g: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let (oh, ow) = (self.cols.len(), self.rows.len());
        let mut gx = vec![T::zero(); self.c * h * w];
        gx.par_chunks_mut(h * w)
            .zip(g.par_chunks(oh * ow))
            .for_each(|(gc, go)| {
                let mut tmp = vec![T::zero(); h * ow];
                for (jy, taps) in self.cols.iter().enumerate() {
                    let grow = &go[jy * ow..(jy + 1) * ow];
                    for &(i, wt) in taps {
                        for (t, &v) in tmp[i * ow..(i + 1) * ow].iter_mut().zip(grow) {
                            *t += wt * v;
                        }
                    }
                }
                for y in 0..h {
                    let xrow = &mut gc[y * w..(y + 1) * w];
                    for (j, taps) in self.rows.iter().enumerate() {
                        let v = tmp[y * ow + j];
                        for &(i, wt) in taps {
                            xrow[i] += wt * v;
                        }
                    }
                }
            });
        gx
    }
}

impl<T: Real> CustomOp<T> for Separable<T> {
    fn name(&self) -> &'static str {
        "lanczos_downsample"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        vec![needs[0].then(|| self.transpose(grad_out))]
    }
}

/// Lanczos downsampling of a plain `[C,tH,tW]` tensor.
pub fn downsample<T: Real>(img: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let op = Separable::<T>::new(img.chw()?, t)?;
    Tensor::new(&op.out_shape(), op.forward(img.data()))
}

/// Adjoint of [`downsample`]: maps a `[C,H,W]` tensor back to `[C,tH,tW]`.
pub fn downsample_adjoint<T: Real>(y: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let (c, h, w) = y.chw()?;
    let op = Separable::<T>::new((c, h * t, w * t), t)?;
    Tensor::new(&[c, h * t, w * t], op.transpose(y.data()))
}

/// Differentiable Lanczos downsampling on a graph node.
pub fn lanczos_downsample<T: Real>(g: &mut Graph<T>, x: Var, t: usize) -> Result<Var> {
    let op = Separable::<T>::new(g.value(x).chw()?, t)?;
    let out = Tensor::new(&op.out_shape(), op.forward(g.value(x).data()))?;
    Ok(g.custom(&[x], out, Box::new(op)))
}

/// Catmull-Rom cubic (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(n: usize, t: usize) -> Vec<[(usize, f64); 4]> {
    let last = n as isize - 1;
    (0..n * t)
        .map(|o| {
            let src = (o as f64 + 0.5) / t as f64 - 0.5;
            let base = src.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (k, tap) in taps.iter_mut().enumerate() {
                let i = base - 1 + k as isize;
                *tap = (i.clamp(0, last) as usize, cubic_kernel(src - i as f64));
            }
            taps
        })
        .collect()
}

/// Bicubic upsampling by `t`, clipped to `[0,1]`.
pub fn bicubic_upsample<T: Real>(img: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::invalid("bicubic_upsample", "factor must be >= 1"));
    }
    let (c, h, w) = img.chw()?;
    if t == 1 {
        return Ok(img.map(|v| v.max(T::zero()).min(T::one())));
    }
    let (oh, ow) = (h * t, w * t);
    let tx = cubic_taps(w, t);
    let ty = cubic_taps(h, t);
    let mut out = vec![T::zero(); c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(img.data().par_chunks(h * w))
        .for_each(|(oc, xc)| {
            let mut tmp = vec![0.0f64; h * ow];
            for y in 0..h {
                for (ox, taps) in tx.iter().enumerate() {
                    tmp[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * xc[y * w + i].f64()).sum();
                }
            }
            for (oy, taps) in ty.iter().enumerate() {
                for ox in 0..ow {
                    let v: f64 = taps.iter().map(|&(i, wt)| wt * tmp[i * ow + ox]).sum();
                    oc[oy * ow + ox] = T::of(v.clamp(0.0, 1.0));
                }
            }
        });
    Tensor::new(&[c, oh, ow], out)
}
