//! Built-in verification suites behind the `selftest` subcommand.
//!
//! The gradient suite compares every backward rule, and both full networks,
//! against double-precision central differences on randomly drawn shapes.
//! Inputs that feed piecewise-linear ops are kept a safe distance from their
//! kinks. The kernel suite checks the resampling filter against fixed values.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::gradcheck::{check_gradients, GradReport, Tolerance};
use crate::params::{Bound, NetworkParams};
use crate::reference::{affine_grid, grid_sample, AffineParams, ReferenceConfig, ReferenceNet};
use crate::resampling::{build_downsample, lanczos_downsample, lanczos_kernel};
use crate::tensor::{Activation, Graph, Tensor, Var};

/// Gradient-check outcome for one operation over several random configurations.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: &'static str,
    pub configs: usize,
    pub report: GradReport,
}

#[derive(Clone, Debug)]
pub struct GradientSuite {
    pub ops: Vec<OpReport>,
    pub elapsed: Duration,
}

impl GradientSuite {
    pub fn configs(&self) -> usize {
        self.ops.iter().map(|o| o.configs).sum()
    }

    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.report.passed())
    }
}

impl fmt::Display for GradientSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.ops {
            writeln!(
                f,
                "  {:<20} {:>3} configs {:>5} entries  max rel {:.1e}  {}",
                o.op,
                o.configs,
                o.report.checked,
                o.report.max_rel,
                if o.report.passed() { "ok" } else { "FAILED" }
            )?;
        }
        write!(f, "  {} configurations in {:.1?}", self.configs(), self.elapsed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform in `+-[gap, 1]`, so nothing sits near zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// Normalized sampling coordinates whose pixel positions avoid integers.
fn smooth_grid(rng: &mut ChaCha8Rng, oh: usize, ow: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut v = Vec::with_capacity(oh * ow * 2);
    for _ in 0..oh * ow {
        for n in [w, h] {
            let cell = rng.random_range(-1..n as i64) as f64;
            let p = cell + rng.random_range(0.1..0.9);
            v.push((2.0 * p + 1.0) / n as f64 - 1.0);
        }
    }
    Tensor::new(&[oh, ow, 2], v).expect("length matches shape")
}

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

fn run_op(
    op: &'static str,
    cases: Vec<Case>,
    rng: &mut ChaCha8Rng,
    per_input: usize,
    tol: Tolerance,
) -> Result<OpReport> {
    let mut report = GradReport::default();
    let configs = cases.len();
    for case in cases {
        report.merge(check_gradients(&case.inputs, &case.build, tol, per_input, rng)?);
    }
    Ok(OpReport { op, configs, report })
}

fn conv_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..16)
        .map(|_| {
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..=k / 2);
            let h = rng.random_range(k..k + 5);
            let w = rng.random_range(k..k + 5);
            let inputs = vec![
                uniform(rng, &[cin, h, w], -1.0, 1.0),
                uniform(rng, &[cout, cin, k, k], -1.0, 1.0),
                uniform(rng, &[cout], -1.0, 1.0),
            ];
            Case {
                inputs,
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)),
            }
        })
        .collect()
}

fn activation_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..14)
        .map(|i| {
            let shape = [rng.random_range(1..3), rng.random_range(2..5), rng.random_range(2..5)];
            let mode = if i % 2 == 0 {
                Activation::LeakyRelu(rng.random_range(0.05..0.5))
            } else {
                Activation::Sigmoid
            };
            Case {
                inputs: vec![away_from_zero(rng, &shape, 0.01).map(|v| v * 3.0)],
                build: Box::new(move |g, v| g.activation(v[0], mode)),
            }
        })
        .collect()
}

fn norm_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..12)
        .map(|_| {
            let c = rng.random_range(1..4);
            let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
            let inputs = vec![
                uniform(rng, &[c, h, w], -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ];
            Case {
                inputs,
                build: Box::new(|g, v| g.instance_norm(v[0], v[1], v[2], 1e-5)),
            }
        })
        .collect()
}

fn concat_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..8)
        .map(|_| {
            let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
            let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
            let inputs = vec![uniform(rng, &[ca, h, w], -1.0, 1.0), uniform(rng, &[cb, h, w], -1.0, 1.0)];
            Case {
                inputs,
                build: Box::new(|g, v| g.concat(v[0], v[1])),
            }
        })
        .collect()
}

fn upsample_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..10)
        .map(|_| {
            let factor = rng.random_range(1..4);
            let shape = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5)];
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |g, v| g.bilinear_upsample(v[0], factor)),
            }
        })
        .collect()
}

fn mse_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..8)
        .map(|_| {
            let shape = [rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5)];
            Case {
                inputs: vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
                build: Box::new(|g, v| g.mse(v[0], v[1])),
            }
        })
        .collect()
}

fn downsample_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..10)
        .map(|_| {
            let t = rng.random_range(2..5);
            let shape = [rng.random_range(1..3), t * rng.random_range(1..4), t * rng.random_range(1..4)];
            Case {
                inputs: vec![uniform(rng, &shape, 0.0, 1.0)],
                build: Box::new(move |g, v| lanczos_downsample(g, v[0], t)),
            }
        })
        .collect()
}

fn affine_grid_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..8)
        .map(|_| {
            let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
            Case {
                inputs: vec![uniform(rng, &[6], -1.0, 1.0)],
                build: Box::new(move |g, v| affine_grid(g, v[0], h, w)),
            }
        })
        .collect()
}

fn grid_sample_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    (0..10)
        .map(|_| {
            let c = rng.random_range(1..3);
            let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
            let (oh, ow) = (rng.random_range(1..5), rng.random_range(1..5));
            let inputs = vec![uniform(rng, &[c, h, w], -1.0, 1.0), smooth_grid(rng, oh, ow, h, w)];
            Case {
                inputs,
                build: Box::new(|g, v| grid_sample(g, v[0], v[1])),
            }
        })
        .collect()
}

fn generator_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    (0..4)
        .map(|i| {
            let cfg = GeneratorConfig {
                levels: 1 + i % 2,
                channels: 3,
                skip_channels: 2,
                kernel: 3,
                noise_channels: 2,
                out_channels: 2,
            };
            let mut params = NetworkParams::<f64>::new();
            let gen = Generator::init(&cfg, &mut params, rng)?;
            let side = 4 << cfg.levels;
            let mut inputs = vec![uniform(rng, &[2, side, side], 0.0, 0.1)];
            inputs.extend(params.iter().map(|p| p.value.clone()));
            Ok(Case {
                inputs,
                build: Box::new(move |g, v| {
                    let b = Bound::from_vars(v[1..].to_vec());
                    gen.forward(g, &b, v[0])
                }),
            })
        })
        .collect()
}

fn encoder_cases(rng: &mut ChaCha8Rng) -> Result<Vec<Case>> {
    (0..4)
        .map(|_| {
            let cfg = ReferenceConfig {
                levels: 1,
                channels: 2,
                loc_channels: 2,
                image_channels: 2,
            };
            let mut params = NetworkParams::<f64>::new();
            let net = ReferenceNet::init(&cfg, &mut params, rng)?;
            // move the transform off the identity so samples fall between pixels
            let stn = net.stn(0);
            let d = |rng: &mut ChaCha8Rng| rng.random_range(-0.04..0.04);
            let theta = AffineParams([
                1.0 + d(rng),
                d(rng),
                0.03 + d(rng).abs(),
                d(rng),
                1.0 + d(rng),
                -0.05 - d(rng).abs(),
            ]);
            params.get_mut(stn.head_bias()).value = theta.to_tensor();
            let hw = params.get(stn.head_weight()).value.shape().to_vec();
            params.get_mut(stn.head_weight()).value = uniform(rng, &hw, -0.02, 0.02);
            let mut inputs = vec![uniform(rng, &[2, 16, 16], 0.0, 1.0)];
            inputs.extend(params.iter().map(|p| p.value.clone()));
            Ok(Case {
                inputs,
                build: Box::new(move |g, v| {
                    let b = Bound::from_vars(v[1..].to_vec());
                    let feats = net.encode(g, &b, v[0])?;
                    let recon = net.reconstruct(g, &b, &feats)?;
                    // deepest features and reconstruction as one column for the projection
                    let n = g.value(feats.deepest()).len();
                    let deep = g.reshape(feats.deepest(), &[n, 1, 1])?;
                    let m = g.value(recon).len();
                    let flat = g.reshape(recon, &[m, 1, 1])?;
                    g.concat(deep, flat)
                }),
            })
        })
        .collect()
}

/// Runs every gradient check with one seeded stream.
pub fn gradient_suite(seed: u64) -> Result<GradientSuite> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    let small: [(&'static str, fn(&mut ChaCha8Rng) -> Vec<Case>); 9] = [
        ("conv2d", conv_cases),
        ("activation", activation_cases),
        ("instance_norm", norm_cases),
        ("concat", concat_cases),
        ("bilinear_upsample", upsample_cases),
        ("mse", mse_cases),
        ("lanczos_downsample", downsample_cases),
        ("affine_grid", affine_grid_cases),
        ("grid_sample", grid_sample_cases),
    ];
    for (name, make) in small {
        let cases = make(&mut rng);
        ops.push(run_op(name, cases, &mut rng, 24, Tolerance::strict())?);
    }
    // whole networks hold hundreds of leaky ReLUs and bilinear lookups; a
    // smaller step keeps the stencil from straddling their kinks. The
    // generator sees 0.1-amplitude noise, so its first norms divide by small
    // deviations and need the smallest step.
    let fine = Tolerance {
        h: 1e-5,
        ..Tolerance::strict()
    };
    let cases = generator_cases(&mut rng)?;
    ops.push(run_op("generator", cases, &mut rng, 6, Tolerance { h: 1e-6, ..fine })?);
    let cases = encoder_cases(&mut rng)?;
    ops.push(run_op("reference_encoder", cases, &mut rng, 6, fine)?);
    Ok(GradientSuite {
        ops,
        elapsed: start.elapsed(),
    })
}

#[derive(Clone, Debug)]
pub struct KernelCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> KernelCheck {
    KernelCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Fixed kernel values, partition of unity and the adjoint identity.
pub fn kernel_suite(seed: u64) -> Result<Vec<KernelCheck>> {
    let mut out = vec![
        check("L(0) = 1", lanczos_kernel(0.0) == 1.0, format!("{}", lanczos_kernel(0.0))),
        check(
            "L(1) = L(2) = 0",
            lanczos_kernel(1.0) == 0.0 && lanczos_kernel(2.0) == 0.0,
            format!("{} {}", lanczos_kernel(1.0), lanczos_kernel(2.0)),
        ),
        check(
            "L(0.5) = 0.607927",
            (lanczos_kernel(0.5) - 0.607927).abs() <= 1e-6,
            format!("{:.9}", lanczos_kernel(0.5)),
        ),
        check(
            "L(1.5) = -0.135095",
            (lanczos_kernel(1.5) + 0.135095).abs() <= 1e-6,
            format!("{:.9}", lanczos_kernel(1.5)),
        ),
    ];
    let mut worst_row = 0.0f64;
    let mut worst_adj = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 2..=8 {
        for m in [1, 3, 8, 32] {
            let d = build_downsample(t, t * m)?;
            for row in d.matrix() {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let x: Vec<f64> = (0..t * m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs: f64 = d.apply(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(d.apply_transpose(&y)).map(|(a, b)| a * b).sum();
            worst_adj = worst_adj.max((lhs - rhs).abs());
        }
    }
    out.push(check("rows sum to 1", worst_row <= 1e-9, format!("max dev {worst_row:.1e}")));
    out.push(check("<Dx,y> = <x,D'y>", worst_adj <= 1e-6, format!("max dev {worst_adj:.1e}")));
    Ok(out)
}

/// Runs both suites, printing a report; true iff everything passed.
pub fn run_selftest(out: &mut impl std::io::Write) -> Result<bool> {
    let grads = gradient_suite(0)?;
    writeln!(out, "gradient suite: {}", if grads.passed() { "ok" } else { "FAILED" })?;
    writeln!(out, "{grads}")?;
    let kernels = kernel_suite(0)?;
    let kernels_ok = kernels.iter().all(|k| k.passed);
    writeln!(out, "kernel suite: {}", if kernels_ok { "ok" } else { "FAILED" })?;
    for k in &kernels {
        writeln!(out, "  {:<20} {:<28} {}", k.name, k.detail, if k.passed { "ok" } else { "FAILED" })?;
    }
    Ok(grads.passed() && grads.configs() >= 100 && kernels_ok)
}
