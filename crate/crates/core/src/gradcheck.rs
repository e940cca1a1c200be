//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes, so it is independent of every
//! backward rule it verifies. It backs the in-crate gradient tests and the
//! `selftest` CLI subcommand.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Relative error bound for ordinary entries.
    pub rel: f64,
    /// Absolute error bound for entries whose magnitude is below `small`.
    pub abs: f64,
    pub small: f64,
    /// Finite-difference step.
    pub h: f64,
}

impl Tolerance {
    /// Double-precision bounds: rel 1e-5, abs 1e-7 below 1e-4, step 1e-4.
    pub fn strict() -> Self {
        Tolerance {
            rel: 1e-5,
            abs: 1e-7,
            small: 1e-4,
            h: 1e-4,
        }
    }

    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        let err = (analytic - numeric).abs();
        let mag = analytic.abs().max(numeric.abs());
        if mag < self.small {
            err <= self.abs
        } else {
            err / mag < self.rel
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel = self.max_rel.max(other.max_rel);
        self.failures.extend(other.failures);
    }
}

/// Scalar function of a tuple of tensors, evaluated by building a fresh graph.
fn evaluate<F>(inputs: &[Tensor<f64>], build: &F, proj: Option<&Tensor<f64>>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars)?;
    Ok(match proj {
        Some(r) => g
            .value(out)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum(),
        None => g.value(out).item(),
    })
}

/// Central difference of `f` w.r.t. entry `index` of input `input`.
pub fn central_difference(
    inputs: &[Tensor<f64>],
    input: usize,
    index: usize,
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
) -> Result<f64> {
    let mut work = inputs.to_vec();
    let x0 = work[input].data()[index];
    work[input].data_mut()[index] = x0 + h;
    let fp = f(&work)?;
    work[input].data_mut()[index] = x0 - h;
    let fm = f(&work)?;
    Ok((fp - fm) / (2.0 * h))
}

/// Checks analytic gradients of `sum(build(inputs) * R)` for a random projection `R`
/// against central differences, sampling at most `max_per_input` entries per input.
pub fn check_gradients<F, R>(
    inputs: &[Tensor<f64>],
    build: F,
    tol: Tolerance,
    max_per_input: usize,
    rng: &mut R,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let proj = if g.value(out).len() == 1 {
        None
    } else {
        Some(Tensor::from_fn(g.shape(out), |_| rng.random_range(-1.0..1.0)))
    };
    let loss = match &proj {
        Some(r) => {
            let rv = g.constant(r.clone());
            let p = g.mul(out, rv)?;
            g.sum(p)
        }
        None => out,
    };
    g.backward(loss)?;

    let mut report = GradReport::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad_tensor(*v).expect("leaf requires grad");
        let n = inputs[k].len();
        let picks: Vec<usize> = if n <= max_per_input {
            (0..n).collect()
        } else {
            let mut p = sample(rng, n, max_per_input).into_vec();
            p.sort_unstable();
            p
        };
        for idx in picks {
            let numeric = central_difference(inputs, k, idx, tol.h, |t| {
                evaluate(t, &build, proj.as_ref())
            })?;
            let a = analytic.data()[idx];
            report.checked += 1;
            let mag = a.abs().max(numeric.abs());
            if mag >= tol.small {
                report.max_rel = report.max_rel.max((a - numeric).abs() / mag);
            }
            if !tol.accepts(a, numeric) {
                report.failures.push(Mismatch {
                    input: k,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
