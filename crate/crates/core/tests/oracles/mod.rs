//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mipsr_core::image::Role;
use mipsr_core::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(c: usize, h: usize, w: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageBuffer::new(c, h, w, v, Role::GroundTruth).unwrap()
}

/// Box-blurred random field.
pub fn smooth(c: usize, h: usize, w: usize, seed: u64) -> ImageBuffer {
    let r = random(c, h + 4, w + 4, seed);
    let mut v = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let band = r.band(ch);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in 0..5 {
                    for dx in 0..5 {
                        s += band[(y + dy) * (w + 4) + x + dx];
                    }
                }
                v.push(s / 25.0);
            }
        }
    }
    ImageBuffer::new(c, h, w, v, Role::GroundTruth).unwrap()
}

pub fn add_noise(a: &ImageBuffer, std: f64, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = a
        .values()
        .iter()
        .map(|&x| {
            let u: f64 = (0..12).map(|_| rng.random_range(0.0..1.0)).sum::<f64>() - 6.0;
            (x + std * u).clamp(0.0, 1.0)
        })
        .collect();
    let [c, h, w] = a.shape();
    ImageBuffer::new(c, h, w, v, Role::Sr).unwrap()
}

/// `out(y, x) = in(y + sy, x + sx)` by bilinear interpolation, pixel units.
/// Returns `None` where any tap falls outside the plane.
pub fn bilinear_shift(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + sy, x as f64 + sx);
            let (y0, x0) = (py.floor(), px.floor());
            let (fy, fx) = (py - y0, px - x0);
            if y0 < 0.0 || x0 < 0.0 || y0 + 1.0 >= h as f64 || x0 + 1.0 >= w as f64 {
                out.push(None);
                continue;
            }
            let (y0, x0) = (y0 as usize, x0 as usize);
            let at = |yy: usize, xx: usize| plane[yy * w + xx];
            out.push(Some(
                (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)),
            ));
        }
    }
    out
}

/// Independent VIF: 2-D kernels, direct window loops, explicit border mirroring.
pub fn vif_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    fn kernel2d(n: usize, sigma: f64) -> Vec<Vec<f64>> {
        let c = (n as f64 - 1.0) / 2.0;
        let mut k = vec![vec![0.0; n]; n];
        let mut s = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - c, j as f64 - c);
                *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                s += *v;
            }
        }
        for row in k.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        k
    }
    fn mirror(i: i64, n: i64) -> usize {
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    }
    let mut x: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|c| a[y * w + c] * 255.0).collect()).collect();
    let mut z: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|c| b[y * w + c] * 255.0).collect()).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for s in 1..=4 {
        let sigma = 2f64.powi(5 - s as i32) / 5.0;
        let n = 2 * (3.0 * sigma).ceil() as usize + 1;
        let k = kernel2d(n, sigma);
        let r = (n / 2) as i64;
        if s > 1 {
            let blur = |p: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                let (ph, pw) = (p.len() as i64, p[0].len() as i64);
                let mut out = Vec::new();
                let mut y = 0;
                while y < ph {
                    let mut row = Vec::new();
                    let mut xx = 0;
                    while xx < pw {
                        let mut acc = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                let yy = mirror(y + i as i64 - r, ph);
                                let xs = mirror(xx + j as i64 - r, pw);
                                acc += k[i][j] * p[yy][xs];
                            }
                        }
                        row.push(acc);
                        xx += 2;
                    }
                    out.push(row);
                    y += 2;
                }
                out
            };
            x = blur(&x);
            z = blur(&z);
        }
        let (ph, pw) = (x.len(), x[0].len());
        for y in 0..=ph - n {
            for c in 0..=pw - n {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let (p, q) = (x[y + i][c + j], z[y + i][c + j]);
                        ma += k[i][j] * p;
                        mb += k[i][j] * q;
                        saa += k[i][j] * p * p;
                        sbb += k[i][j] * q * q;
                        sab += k[i][j] * p * q;
                    }
                }
                let var_a = (saa - ma * ma).max(0.0);
                let var_b = (sbb - mb * mb).max(0.0);
                let cov = sab - ma * mb;
                let (g, sv, sa) = if var_a < 1e-10 {
                    (0.0, if var_b < 1e-10 { 1e-10 } else { var_b.max(1e-10) }, 0.0)
                } else if var_b < 1e-10 {
                    (0.0, 1e-10, var_a)
                } else {
                    let g = cov / (var_a + 1e-10);
                    if g < 0.0 {
                        (0.0, var_b.max(1e-10), var_a)
                    } else {
                        (g, (var_b - g * cov).max(1e-10), var_a)
                    }
                };
                num += (1.0 + g * g * sa / (sv + 2.0)).log2();
                den += (1.0 + sa / 2.0).log2();
            }
        }
    }
    num / den
}
