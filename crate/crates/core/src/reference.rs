//! Reference-image encoder with spatial-transformer alignment at every scale,
//! and the mirror decoder that reconstructs the reference from its features.
//!
//! Normalized coordinates follow the half-pixel convention: pixel `j` of an
//! extent `n` sits at `(2j + 1) / n - 1`, so corners of the image map to `+-1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ConvBlock, NetworkParams, ParamId, LEAKY_SLOPE};
use crate::tensor::{CustomOp, Graph, Real, Tensor, Var};

/// Row-major 2x3 affine matrix over normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams(pub [f64; 6]);

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        AffineParams([1.0, 0.0, dx, 0.0, 1.0, dy])
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[6], |k| T::of(self.0[k]))
    }

    pub fn from_slice<T: Real>(v: &[T]) -> Self {
        let mut t = [0.0; 6];
        for (d, s) in t.iter_mut().zip(v) {
            *d = s.f64();
        }
        AffineParams(t)
    }
}

#[inline]
fn lattice(j: usize, n: usize) -> f64 {
    (2 * j + 1) as f64 / n as f64 - 1.0
}

struct AffineGridOp {
    h: usize,
    w: usize,
}

impl<T: Real> CustomOp<T> for AffineGridOp {
    fn name(&self) -> &'static str {
        "affine_grid"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut acc = [0.0f64; 6];
        for i in 0..self.h {
            let y = lattice(i, self.h);
            for j in 0..self.w {
                let x = lattice(j, self.w);
                let k = (i * self.w + j) * 2;
                let (gx, gy) = (g[k].f64(), g[k + 1].f64());
                acc[0] += gx * x;
                acc[1] += gx * y;
                acc[2] += gx;
                acc[3] += gy * x;
                acc[4] += gy * y;
                acc[5] += gy;
            }
        }
        vec![Some(acc.iter().map(|&v| T::of(v)).collect())]
    }
}

fn grid_values<T: Real>(theta: &[T], h: usize, w: usize) -> Vec<T> {
    let t: Vec<f64> = theta.iter().map(|v| v.f64()).collect();
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let y = lattice(i, h);
        for j in 0..w {
            let x = lattice(j, w);
            out.push(T::of(t[0] * x + t[1] * y + t[2]));
            out.push(T::of(t[3] * x + t[4] * y + t[5]));
        }
    }
    out
}

/// Sampling grid `[H,W,2]` holding `(x_in, y_in) = theta * (x_out, y_out, 1)`.
pub fn affine_grid<T: Real>(g: &mut Graph<T>, theta: Var, out_h: usize, out_w: usize) -> Result<Var> {
    if out_h < 2 || out_w < 2 {
        return Err(Error::invalid(
            "affine_grid",
            format!("output extents must be >= 2, got {out_h}x{out_w}"),
        ));
    }
    if g.value(theta).len() != 6 {
        return Err(Error::invalid(
            "affine_grid",
            format!("theta needs 6 entries, got shape {:?}", g.shape(theta)),
        ));
    }
    let data = grid_values(g.value(theta).data(), out_h, out_w);
    let out = Tensor::new(&[out_h, out_w, 2], data)?;
    Ok(g.custom(&[theta], out, Box::new(AffineGridOp { h: out_h, w: out_w })))
}

/// Plain-tensor version of [`affine_grid`].
pub fn affine_grid_tensor<T: Real>(theta: &AffineParams, out_h: usize, out_w: usize) -> Tensor<T> {
    let th = theta.to_tensor::<T>();
    Tensor::new(&[out_h, out_w, 2], grid_values(th.data(), out_h, out_w)).expect("grid shape")
}

/// Bilinear corner weights of one sample; out-of-range corners carry index `None`.
#[derive(Clone, Copy)]
struct Corners {
    idx: [Option<usize>; 4],
    wgt: [f64; 4],
    // (x0, y0) fractional offsets for the grid derivative
    fx: f64,
    fy: f64,
}

fn corners(gx: f64, gy: f64, h: usize, w: usize) -> Corners {
    let ix = ((gx + 1.0) * w as f64 - 1.0) / 2.0;
    let iy = ((gy + 1.0) * h as f64 - 1.0) / 2.0;
    let x0 = ix.floor();
    let y0 = iy.floor();
    let fx = ix - x0;
    let fy = iy - y0;
    let at = |yy: f64, xx: f64| -> Option<usize> {
        if xx >= 0.0 && yy >= 0.0 && xx < w as f64 && yy < h as f64 {
            Some(yy as usize * w + xx as usize)
        } else {
            None
        }
    };
    Corners {
        idx: [at(y0, x0), at(y0, x0 + 1.0), at(y0 + 1.0, x0), at(y0 + 1.0, x0 + 1.0)],
        wgt: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}

fn sample_corners<T: Real>(grid: &[T], h: usize, w: usize) -> Vec<Corners> {
    grid.chunks(2)
        .map(|p| corners(p[0].f64(), p[1].f64(), h, w))
        .collect()
}

struct GridSampleOp {
    c: usize,
    h: usize,
    w: usize,
}

impl<T: Real> CustomOp<T> for GridSampleOp {
    fn name(&self) -> &'static str {
        "grid_sample"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (feat, grid) = (inputs[0].data(), inputs[1].data());
        let (c, h, w) = (self.c, self.h, self.w);
        let cs = sample_corners(grid, h, w);
        let n = cs.len();
        let gfeat = needs[0].then(|| {
            let mut gf = vec![T::zero(); c * h * w];
            gf.par_chunks_mut(h * w).enumerate().for_each(|(ch, gc)| {
                let go = &g[ch * n..(ch + 1) * n];
                for (s, cr) in cs.iter().enumerate() {
                    for k in 0..4 {
                        if let Some(i) = cr.idx[k] {
                            gc[i] += T::of(cr.wgt[k]) * go[s];
                        }
                    }
                }
            });
            gf
        });
        let ggrid = needs[1].then(|| {
            let mut gg = vec![T::zero(); n * 2];
            for (s, cr) in cs.iter().enumerate() {
                let (mut dx, mut dy) = (0.0f64, 0.0f64);
                for ch in 0..c {
                    let fc = &feat[ch * h * w..(ch + 1) * h * w];
                    let v = |k: usize| cr.idx[k].map_or(0.0, |i| fc[i].f64());
                    let go = g[ch * n + s].f64();
                    dx += go * ((v(1) - v(0)) * (1.0 - cr.fy) + (v(3) - v(2)) * cr.fy);
                    dy += go * ((v(2) - v(0)) * (1.0 - cr.fx) + (v(3) - v(1)) * cr.fx);
                }
                gg[2 * s] = T::of(dx * w as f64 / 2.0);
                gg[2 * s + 1] = T::of(dy * h as f64 / 2.0);
            }
            gg
        });
        vec![gfeat, ggrid]
    }
}

fn sample_values<T: Real>(feat: &[T], grid: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let cs = sample_corners(grid, h, w);
    let n = cs.len();
    let mut out = vec![T::zero(); c * n];
    out.par_chunks_mut(n).enumerate().for_each(|(ch, oc)| {
        let fc = &feat[ch * h * w..(ch + 1) * h * w];
        for (o, cr) in oc.iter_mut().zip(&cs) {
            let mut acc = 0.0f64;
            for k in 0..4 {
                if let Some(i) = cr.idx[k] {
                    acc += cr.wgt[k] * fc[i].f64();
                }
            }
            *o = T::of(acc);
        }
    });
    out
}

/// Bilinear sampling of `[C,H,W]` features at grid `[H',W',2]`, zero outside.
pub fn grid_sample<T: Real>(g: &mut Graph<T>, features: Var, grid: Var) -> Result<Var> {
    let (c, h, w) = g.value(features).chw()?;
    let &[gh, gw, 2] = g.shape(grid) else {
        return Err(Error::invalid(
            "grid_sample",
            format!("grid must be [H,W,2], got {:?}", g.shape(grid)),
        ));
    };
    if !g.value(grid).is_finite() {
        return Err(Error::invalid("grid_sample", "grid contains non-finite values"));
    }
    let data = sample_values(g.value(features).data(), g.value(grid).data(), c, h, w);
    let out = Tensor::new(&[c, gh, gw], data)?;
    Ok(g.custom(&[features, grid], out, Box::new(GridSampleOp { c, h, w })))
}

/// Plain-tensor version of [`grid_sample`].
pub fn grid_sample_tensor<T: Real>(features: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let gr = g.constant(grid.clone());
    let out = grid_sample(&mut g, f, gr)?;
    Ok(g.value(out).clone())
}

pub const STN_MIN_EXTENT: usize = 8;

/// Localisation net (two stride-2 convs, global pool, affine head) plus sampler.
#[derive(Clone, Debug)]
pub struct StnBlock {
    loc1: Conv,
    loc2: Conv,
    head: Conv,
}

impl StnBlock {
    pub fn init<T: Real, R: rand::Rng>(
        params: &mut NetworkParams<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        loc_channels: usize,
    ) -> Self {
        let loc1 = Conv::init(params, rng, &format!("{name}.loc1"), channels, loc_channels, 3, 2);
        let loc2 = Conv::init(params, rng, &format!("{name}.loc2"), loc_channels, loc_channels, 3, 2);
        let head = Conv::init(params, rng, &format!("{name}.head"), loc_channels, 6, 1, 1);
        params.get_mut(head.weight).value.data_mut().fill(T::zero());
        params.get_mut(head.bias).value = AffineParams::IDENTITY.to_tensor();
        StnBlock { loc1, loc2, head }
    }

    /// Bias of the affine head; at initialization it holds the identity transform.
    pub fn head_bias(&self) -> ParamId {
        self.head.bias
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    /// Returns `(aligned, theta)` nodes.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<(Var, Var)> {
        let (_, h, w) = g.value(features).chw()?;
        if h < STN_MIN_EXTENT || w < STN_MIN_EXTENT {
            return Err(Error::invalid(
                "stn_block",
                format!("features must be at least {STN_MIN_EXTENT}x{STN_MIN_EXTENT}, got {h}x{w}"),
            ));
        }
        let x = self.loc1.forward(g, b, features)?;
        let x = g.leaky_relu(x, LEAKY_SLOPE)?;
        let x = self.loc2.forward(g, b, x)?;
        let x = g.leaky_relu(x, LEAKY_SLOPE)?;
        let x = g.global_avg_pool(x)?;
        let theta = self.head.forward(g, b, x)?;
        let theta = g.reshape(theta, &[6])?;
        let grid = affine_grid(g, theta, h, w)?;
        let aligned = grid_sample(g, features, grid)?;
        Ok((aligned, theta))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceConfig {
    pub levels: usize,
    pub channels: usize,
    pub loc_channels: usize,
    pub image_channels: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            levels: 4,
            channels: 64,
            loc_channels: 16,
            image_channels: 3,
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels == 0 || self.loc_channels == 0 || self.image_channels == 0 {
            return Err(Error::InvalidConfig(
                "reference encoder levels and channel counts must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-scale aligned features, finest first; the last entry feeds the latent map.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub scales: Vec<Var>,
    pub thetas: Vec<Var>,
}

impl FeatureMaps {
    pub fn deepest(&self) -> Var {
        *self.scales.last().expect("at least one scale")
    }
}

#[derive(Clone, Debug)]
struct EncLevel {
    down: ConvBlock,
    stn: StnBlock,
}

#[derive(Clone, Debug)]
pub struct ReferenceNet {
    cfg: ReferenceConfig,
    encoder: Vec<EncLevel>,
    decoder: Vec<ConvBlock>,
    head: Conv,
}

impl ReferenceNet {
    pub fn init<T: Real, R: rand::Rng>(
        cfg: &ReferenceConfig,
        params: &mut NetworkParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.channels;
        let mut encoder = Vec::with_capacity(cfg.levels);
        for level in 0..cfg.levels {
            let ci = if level == 0 { cfg.image_channels } else { m };
            let name = format!("ref.enc{level}");
            encoder.push(EncLevel {
                down: ConvBlock::init(params, rng, &format!("{name}.down"), ci, m, 3, 2),
                stn: StnBlock::init(params, rng, &format!("{name}.stn"), m, cfg.loc_channels),
            });
        }
        let decoder = (0..cfg.levels)
            .map(|level| {
                let ci = if level == 0 { m } else { 2 * m };
                ConvBlock::init(params, rng, &format!("ref.dec{level}"), ci, m, 3, 1)
            })
            .collect();
        let head = Conv::init(params, rng, "ref.head", m, cfg.image_channels, 1, 1);
        Ok(ReferenceNet {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.cfg
    }

    pub fn stn(&self, level: usize) -> &StnBlock {
        &self.encoder[level].stn
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, b: &Bound, reference: Var) -> Result<FeatureMaps> {
        let (_, h, w) = g.value(reference).chw()?;
        let multiple = 1usize << self.cfg.levels;
        for extent in [h, w] {
            if extent % multiple != 0 {
                return Err(Error::NotDivisible {
                    op: "encode_reference",
                    extent,
                    multiple,
                });
            }
        }
        let mut x = reference;
        let mut scales = Vec::with_capacity(self.cfg.levels);
        let mut thetas = Vec::with_capacity(self.cfg.levels);
        for level in &self.encoder {
            x = level.down.forward(g, b, x)?;
            let (aligned, theta) = level.stn.forward(g, b, x)?;
            x = aligned;
            scales.push(aligned);
            thetas.push(theta);
        }
        Ok(FeatureMaps { scales, thetas })
    }

    pub fn reconstruct<T: Real>(&self, g: &mut Graph<T>, b: &Bound, feats: &FeatureMaps) -> Result<Var> {
        if feats.scales.len() != self.cfg.levels {
            return Err(Error::invalid(
                "reconstruct_reference",
                format!(
                    "expected {} feature scales, got {}",
                    self.cfg.levels,
                    feats.scales.len()
                ),
            ));
        }
        let mut x = feats.deepest();
        for level in (0..self.cfg.levels).rev() {
            x = g.bilinear_upsample(x, 2)?;
            if level > 0 {
                x = g.concat(x, feats.scales[level - 1])?;
            }
            x = self.decoder[level].forward(g, b, x)?;
        }
        let y = self.head.forward(g, b, x)?;
        Ok(g.sigmoid(y))
    }

    /// Forward-only encoding; returns the per-scale feature tensors.
    pub fn encode_tensor<T: Real>(&self, params: &NetworkParams<T>, reference: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let r = g.constant(reference.clone());
        let f = self.encode(&mut g, &b, r)?;
        Ok(f.scales.iter().map(|v| g.value(*v).clone()).collect())
    }
}
