//! Full-reference quality measures. Multi-channel images are scored per
//! channel and averaged; there is no luma conversion.
//!
//! VIF is the pixel-domain variant on 8-bit scaled values (noise variance 2).
//! Four scales; scale `s` uses a Gaussian of sigma `2^(5-s)/5` truncated to
//! `2*ceil(3 sigma)+1` taps. Before scales 2..4 the image is low-passed with
//! that scale's window (half-sample symmetric borders) and decimated by 2;
//! local statistics then use valid windows only.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

const VIF_SCALES: usize = 4;
const VIF_NOISE_VAR: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

const MIN_BAND_MEAN: f64 = 1e-8;

fn same_shape(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(peak^2 / mse)` over all channels; identical inputs give `+inf`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let e = mse(a.values(), b.values());
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

/// Normalized 1-D Gaussian with `taps` samples centered on the middle one.
pub fn gaussian_taps(taps: usize, sigma: f64) -> Vec<f64> {
    let c = (taps as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..taps)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// A single-channel plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable correlation keeping only fully covered positions.
    fn filter_valid(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let src = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                v[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v }
    }

    /// Same-size separable correlation with half-sample symmetric borders.
    fn filter_same(&self, k: &[f64]) -> Plane {
        let r = (k.len() / 2) as isize;
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            loop {
                if i < 0 {
                    i = -i - 1;
                } else if i >= n {
                    i = 2 * n - i - 1;
                } else {
                    return i as usize;
                }
            }
        };
        let (h, w) = (self.h, self.w);
        let mut rows = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * self.v[y * w + reflect(x as isize + i as isize - r, w)])
                    .sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * rows[reflect(y as isize + i as isize - r, h) * w + x])
                    .sum();
            }
        }
        Plane { h, w, v }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(self.v[2 * y * self.w + 2 * x]);
            }
        }
        Plane { h, w, v }
    }
}

fn plane(img: &ImageBuffer, c: usize, scale: f64) -> Plane {
    Plane {
        h: img.height(),
        w: img.width(),
        v: img.band(c).iter().map(|v| v * scale).collect(),
    }
}

/// Local means, variances and covariance over valid windows.
struct LocalStats {
    mu_a: Plane,
    mu_b: Plane,
    var_a: Plane,
    var_b: Plane,
    cov: Plane,
}

fn local_stats(a: &Plane, b: &Plane, k: &[f64]) -> LocalStats {
    let mu_a = a.filter_valid(k);
    let mu_b = b.filter_valid(k);
    let aa = a.zip(a, |x, y| x * y).filter_valid(k);
    let bb = b.zip(b, |x, y| x * y).filter_valid(k);
    let ab = a.zip(b, |x, y| x * y).filter_valid(k);
    LocalStats {
        var_a: aa.zip(&mu_a, |s, m| s - m * m),
        var_b: bb.zip(&mu_b, |s, m| s - m * m),
        cov: ab.zip(&mu_a.zip(&mu_b, |x, y| x * y), |s, m| s - m),
        mu_a,
        mu_b,
    }
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid positions only.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_shape("ssim", a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}", a.height(), a.width()),
        ));
    }
    let k = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let s = local_stats(&plane(a, c, 1.0), &plane(b, c, 1.0), &k);
        let mut sum = 0.0;
        for i in 0..s.mu_a.v.len() {
            let (ma, mb) = (s.mu_a.v[i], s.mu_b.v[i]);
            let num = (2.0 * ma * mb + c1) * (2.0 * s.cov.v[i] + c2);
            let den = (ma * ma + mb * mb + c1) * (s.var_a.v[i] + s.var_b.v[i] + c2);
            sum += num / den;
        }
        total += sum / s.mu_a.v.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Gaussian window `(taps, sigma)` of VIF scale `s` in `1..=4`.
pub fn vif_window(s: usize) -> (usize, f64) {
    let sigma = (1u32 << (5 - s)) as f64 / 5.0;
    (2 * (3.0 * sigma).ceil() as usize + 1, sigma)
}

/// Smallest image extent accepted by [`vif`].
pub fn vif_min_extent() -> usize {
    // the extent after s-1 halvings must still hold the scale-s window
    (1..=VIF_SCALES)
        .map(|s| (vif_window(s).0 - 1) * (1 << (s - 1)) + 1)
        .max()
        .unwrap_or(1)
}

/// Numerator and denominator information sums of one band across all scales.
fn vif_band(a: &Plane, b: &Plane) -> (f64, f64) {
    let (mut a, mut b) = (a.clone(), b.clone());
    let (mut num, mut den) = (0.0, 0.0);
    for s in 1..=VIF_SCALES {
        let (taps, sigma) = vif_window(s);
        let k = gaussian_taps(taps, sigma);
        if s > 1 {
            a = a.filter_same(&k).decimate();
            b = b.filter_same(&k).decimate();
        }
        let st = local_stats(&a, &b, &k);
        for i in 0..st.var_a.v.len() {
            let mut sa = st.var_a.v[i].max(0.0);
            let sb = st.var_b.v[i].max(0.0);
            let cov = st.cov.v[i];
            let mut g = cov / (sa + VIF_EPS);
            let mut sv = sb - g * cov;
            if sa < VIF_EPS {
                g = 0.0;
                sv = sb;
                sa = 0.0;
            }
            if sb < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = sb;
                g = 0.0;
            }
            if sv <= VIF_EPS {
                sv = VIF_EPS;
            }
            num += (1.0 + g * g * sa / (sv + VIF_NOISE_VAR)).log2();
            den += (1.0 + sa / VIF_NOISE_VAR).log2();
        }
    }
    (num, den)
}

/// Pixel-domain visual information fidelity of `b` (distorted) against `a`.
pub fn vif(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_shape("vif", a, b)?;
    let min = vif_min_extent();
    if a.height() < min || a.width() < min {
        return Err(Error::invalid(
            "vif",
            format!("images must be at least {min}x{min}, got {}x{}", a.height(), a.width()),
        ));
    }
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (num, den) = vif_band(&plane(a, c, 255.0), &plane(b, c, 255.0));
        if den <= 0.0 {
            return Err(Error::invalid("vif", format!("reference channel {c} is flat")));
        }
        total += num / den;
    }
    Ok(total / a.channels() as f64)
}

/// `(100/t) sqrt(mean_b (rmse_b / mean(ref_b))^2)`.
pub fn ergas(reference: &ImageBuffer, estimate: &ImageBuffer, t: usize) -> Result<f64> {
    same_shape("ergas", reference, estimate)?;
    if t == 0 {
        return Err(Error::invalid("ergas", "scale must be positive"));
    }
    let mut acc = 0.0;
    for c in 0..reference.channels() {
        let r = reference.band(c);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        if mean <= MIN_BAND_MEAN {
            return Err(Error::invalid("ergas", format!("reference channel {c} has near-zero mean {mean:e}")));
        }
        acc += mse(r, estimate.band(c)) / (mean * mean);
    }
    Ok(100.0 / t as f64 * (acc / reference.channels() as f64).sqrt())
}

fn inf_as_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v == f64::INFINITY {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    pub vif: f64,
    pub ergas: f64,
    pub scale: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are plain numbers")
    }
}

/// All four measures of `estimate` against `reference`.
pub fn evaluate(reference: &ImageBuffer, estimate: &ImageBuffer, scale: usize) -> Result<MetricsReport> {
    Ok(MetricsReport {
        psnr: psnr(reference, estimate, 1.0)?,
        ssim: ssim(reference, estimate)?,
        vif: vif(reference, estimate)?,
        ergas: ergas(reference, estimate, scale)?,
        scale,
    })
}
