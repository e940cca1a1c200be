//! Seeded procedural fixtures: a colour scene of overlapping shapes and a
//! warped, recoloured copy that plays the part of the reference image.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Role};

const SHAPES: usize = 14;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, cos: f64, sin: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, cos: f64, sin: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let rot = |cy: f64, cx: f64, cos: f64, sin: f64| {
            let (dy, dx) = (y - cy, x - cx);
            (cos * dy - sin * dx, sin * dy + cos * dx)
        };
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, cos, sin } => {
                let (u, v) = rot(cy, cx, cos, sin);
                (u / ry).powi(2) + (v / rx).powi(2) <= 1.0
            }
            Shape::Rect { cy, cx, hy, hx, cos, sin } => {
                let (u, v) = rot(cy, cx, cos, sin);
                u.abs() <= hy && v.abs() <= hx
            }
        }
    }
}

/// Overlapping flat-coloured ellipses and rotated rectangles over a shaded
/// background, each pixel box-averaged from a 4x4 subgrid. Sharp, slightly
/// anti-aliased edges make it a stand-in for man-made scene content.
pub fn texture(channels: usize, height: usize, width: usize, seed: u64) -> Result<ImageBuffer> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("texture", "extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let base: Vec<f64> = (0..channels).map(|_| rng.random_range(0.3..0.7)).collect();
    let tilt: Vec<(f64, f64)> = (0..channels)
        .map(|_| (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)))
        .collect();
    let shapes: Vec<(Shape, Vec<f64>)> = (0..SHAPES)
        .map(|_| {
            let cy = rng.random_range(0.0..hf);
            let cx = rng.random_range(0.0..wf);
            let a = rng.random_range(hf.min(wf) * 0.05..hf.min(wf) * 0.25);
            let b = rng.random_range(hf.min(wf) * 0.05..hf.min(wf) * 0.25);
            let angle = rng.random_range(0.0..PI);
            let (sin, cos) = angle.sin_cos();
            let shape = if rng.random_bool(0.5) {
                Shape::Ellipse { cy, cx, ry: a, rx: b, cos, sin }
            } else {
                Shape::Rect { cy, cx, hy: a, hx: b, cos, sin }
            };
            let colour = (0..channels).map(|_| rng.random_range(0.1..0.9)).collect();
            (shape, colour)
        })
        .collect();
    let mut values = vec![0.0; channels * height * width];
    let n = SUPERSAMPLE as f64;
    for y in 0..height {
        for x in 0..width {
            let mut acc = vec![0.0; channels];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / n;
                    let px = x as f64 + (sx as f64 + 0.5) / n;
                    // the last shape drawn on top wins
                    match shapes.iter().rev().find(|(s, _)| s.contains(py, px)) {
                        Some((_, colour)) => {
                            for (a, c) in acc.iter_mut().zip(colour) {
                                *a += c;
                            }
                        }
                        None => {
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a += base[c] + tilt[c].0 * (py / hf - 0.5) + tilt[c].1 * (px / wf - 0.5);
                            }
                        }
                    }
                }
            }
            for (c, a) in acc.into_iter().enumerate() {
                values[(c * height + y) * width + x] = a / (n * n);
            }
        }
    }
    ImageBuffer::new(channels, height, width, values, Role::GroundTruth)
}

/// Sub-pixel shift `(dy, dx)` with bilinear interpolation and edge clamping,
/// followed by a per-channel affine recolouring `gain * v + offset`, clipped.
pub fn warp_recolor(img: &ImageBuffer, dy: f64, dx: f64, gain: &[f64], offset: &[f64]) -> Result<ImageBuffer> {
    let [c, h, w] = img.shape();
    if gain.len() != c || offset.len() != c {
        return Err(Error::invalid("warp_recolor", "need one gain and offset per channel"));
    }
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let band = img.band(ch);
        for y in 0..h {
            let sy = clamp(y as f64 - dy, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for x in 0..w {
                let sx = clamp(x as f64 - dx, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let top = band[y0 * w + x0] * (1.0 - fx) + band[y0 * w + x1] * fx;
                let bot = band[y1 * w + x0] * (1.0 - fx) + band[y1 * w + x1] * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.push((gain[ch] * v + offset[ch]).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(c, h, w, out, Role::Reference)
}

/// Ground truth plus its reference: shifted by (1.5, -2.25) pixels and tinted.
pub fn scene(channels: usize, height: usize, width: usize, seed: u64) -> Result<(ImageBuffer, ImageBuffer)> {
    let gt = texture(channels, height, width, seed)?;
    let gain: Vec<f64> = (0..channels).map(|c| 0.85 + 0.05 * c as f64).collect();
    let offset: Vec<f64> = (0..channels).map(|c| 0.08 - 0.03 * c as f64).collect();
    let reference = warp_recolor(&gt, 1.5, -2.25, &gain, &offset)?;
    Ok((gt, reference))
}
