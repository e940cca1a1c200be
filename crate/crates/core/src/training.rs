//! Objective, Adam, and the joint optimization loop.
//!
//! Each iteration encodes the reference, migrates its feature statistics into
//! the generator input, generates the HR estimate, and takes one Adam step on
//!
//! ```text
//! L = mse(lsr, lanczos_downsample(sr, t)) + lambda * mse(ref, reconstruct(ref))
//! ```
//!
//! The noise update is a detached assignment: no gradient flows through it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::image::{ImageBuffer, Role};
use crate::migration::{latent_map, NoiseState, DEFAULT_ALPHA};
use crate::params::NetworkParams;
use crate::reference::{ReferenceConfig, ReferenceNet, STN_MIN_EXTENT};
use crate::resampling::lanczos_downsample;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Upper bound of the uniform initial noise, `n_init ~ U[0, NOISE_AMPLITUDE)`.
pub const NOISE_AMPLITUDE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "adam betas must satisfy 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr > 0.0) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(
                "adam lr and eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bias-corrected Adam update of every parameter; clears gradients afterward.
///
/// Fails without touching anything if any parameter lacks a gradient.
pub fn adam_step<T: Real>(params: &mut NetworkParams<T>, hyper: &AdamHyper, step: usize) -> Result<()> {
    hyper.validate()?;
    if step == 0 {
        return Err(Error::invalid("adam_step", "step counter starts at 1"));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let b1 = T::of(hyper.beta1);
    let b2 = T::of(hyper.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - hyper.beta1.powi(step as i32));
    let bc2 = T::of(1.0 - hyper.beta2.powi(step as i32));
    let lr = T::of(hyper.lr);
    let eps = T::of(hyper.eps);
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let values = p.value.data_mut();
        for k in 0..grad.len() {
            let g = grad[k];
            p.m[k] = b1 * p.m[k] + (one - b1) * g;
            p.v[k] = b2 * p.v[k] + (one - b2) * g * g;
            let mhat = p.m[k] / bc1;
            let vhat = p.v[k] / bc2;
            values[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub sr: Var,
    pub reference: Var,
}

/// `mse(lsr, down(sr)) + lambda * mse(ref, ref_recon)`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    sr: Var,
    lsr: Var,
    reference: Var,
    ref_recon: Var,
    t: usize,
    lambda: f64,
) -> Result<LossTerms> {
    let down = lanczos_downsample(g, sr, t)?;
    if g.shape(down) != g.shape(lsr) {
        return Err(Error::shape("total_loss", g.shape(down), g.shape(lsr)));
    }
    let sr_term = g.mse(lsr, down)?;
    let ref_term = g.mse(reference, ref_recon)?;
    let weighted = g.scale(ref_term, lambda);
    let total = g.add(sr_term, weighted)?;
    Ok(LossTerms {
        total,
        sr: sr_term,
        reference: ref_term,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scale: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub reference: ReferenceConfig,
    pub lambda: f64,
    pub log_every: usize,
    pub adam: AdamHyper,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scale: 4,
            iterations: 10_000,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            generator: GeneratorConfig::default(),
            reference: ReferenceConfig::default(),
            lambda: 1.0,
            log_every: 100,
            adam: AdamHyper::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::InvalidConfig(format!("scale must be >= 2, got {}", self.scale)));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidConfig("alpha must be finite".into()));
        }
        if self.reference.levels != self.generator.levels {
            return Err(Error::InvalidConfig(format!(
                "reference encoder levels ({}) must equal generator levels ({})",
                self.reference.levels, self.generator.levels
            )));
        }
        self.generator.validate()?;
        self.reference.validate()?;
        self.adam.validate()
    }

    /// Iteration 1, every `log_every`-th iteration, and the last one.
    pub fn logs_iteration(&self, i: usize) -> bool {
        i == 1 || i % self.log_every == 0 || i == self.iterations
    }

    /// HR extents must be multiples of this; LSR extents multiples of `2^levels`.
    pub fn hr_multiple(&self) -> usize {
        self.scale * self.generator.multiple()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_sr: f64,
    pub loss_ref: f64,
}

/// Renders records as `iter<TAB>loss_sr<TAB>loss_ref` lines.
pub fn write_log(records: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{:e}\t{:e}", r.iteration, r.loss_sr, r.loss_ref)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    pub iteration: usize,
    pub loss_sr: f64,
    pub loss_ref: f64,
    pub sr: Tensor<T>,
}

/// Owns all mutable state of one optimization run.
pub struct Trainer<T: Real> {
    cfg: RunConfig,
    generator: Generator,
    reference_net: ReferenceNet,
    params: NetworkParams<T>,
    noise: NoiseState<T>,
    lsr: Tensor<T>,
    reference: Tensor<T>,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// Validates shapes and draws parameters, then the initial noise, from one
    /// seeded ChaCha8 stream.
    pub fn new(cfg: &RunConfig, lsr: &Tensor<T>, reference: &Tensor<T>) -> Result<Self> {
        cfg.validate()?;
        if !lsr.is_finite() || !reference.is_finite() {
            return Err(Error::invalid("run_optimization", "inputs must be finite"));
        }
        let (c, h, w) = lsr.chw()?;
        let (rc, rh, rw) = reference.chw()?;
        let t = cfg.scale;
        if rc != c || rh != t * h || rw != t * w {
            return Err(Error::InvalidArgument {
                op: "run_optimization",
                msg: format!(
                    "reference {rc}x{rh}x{rw} must be the LSR {c}x{h}x{w} scaled by {t}"
                ),
            });
        }
        let multiple = cfg.hr_multiple();
        for extent in [rh, rw] {
            if extent % multiple != 0 {
                return Err(Error::NotDivisible {
                    op: "run_optimization",
                    extent,
                    multiple,
                });
            }
        }
        let deepest = rh.min(rw) / cfg.generator.multiple();
        if deepest < STN_MIN_EXTENT {
            return Err(Error::InvalidArgument {
                op: "run_optimization",
                msg: format!(
                    "reference {rh}x{rw} is too small: the deepest feature map must be at least {STN_MIN_EXTENT} pixels across"
                ),
            });
        }
        let mut cfg = cfg.clone();
        cfg.generator.out_channels = c;
        cfg.reference.image_channels = c;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = NetworkParams::new();
        let generator = Generator::init(&cfg.generator, &mut params, &mut rng)?;
        let reference_net = ReferenceNet::init(&cfg.reference, &mut params, &mut rng)?;
        let init = Tensor::from_fn(&[cfg.generator.noise_channels, rh, rw], |_| {
            T::of(rng.random_range(0.0..NOISE_AMPLITUDE))
        });
        Ok(Trainer {
            noise: NoiseState::new(init, cfg.alpha),
            cfg,
            generator,
            reference_net,
            params,
            lsr: lsr.clone(),
            reference: reference.clone(),
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &NetworkParams<T> {
        &self.params
    }

    pub fn noise(&self) -> &NoiseState<T> {
        &self.noise
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn reference_net(&self) -> &ReferenceNet {
        &self.reference_net
    }

    pub fn iteration(&self) -> usize {
        self.step
    }

    /// One full iteration: encode, migrate noise, generate, reconstruct, backprop, Adam.
    pub fn step(&mut self) -> Result<StepOutcome<T>> {
        let iteration = self.step + 1;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let ref_var = g.constant(self.reference.clone());
        let lsr_var = g.constant(self.lsr.clone());

        let feats = self.reference_net.encode(&mut g, &bound, ref_var)?;
        let lm = latent_map(g.value(feats.deepest()), self.noise.init())?;
        self.noise.update(lm)?;

        let noise_var = g.constant(self.noise.current().clone());
        let sr = self.generator.forward(&mut g, &bound, noise_var)?;
        let recon = self.reference_net.reconstruct(&mut g, &bound, &feats)?;
        let loss = total_loss(&mut g, sr, lsr_var, ref_var, recon, self.cfg.scale, self.cfg.lambda)?;

        let total = g.value(loss.total).item().f64();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        g.backward(loss.total)?;
        self.params.absorb_grads(&g, &bound)?;
        adam_step(&mut self.params, &self.cfg.adam, iteration)?;
        self.step = iteration;
        Ok(StepOutcome {
            iteration,
            loss_sr: g.value(loss.sr).item().f64(),
            loss_ref: g.value(loss.reference).item().f64(),
            sr: g.value(sr).clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub sr: ImageBuffer,
    pub log: Vec<LossRecord>,
}

impl RunOutput {
    pub fn first(&self) -> &LossRecord {
        self.log.first().expect("at least one iteration")
    }

    pub fn last(&self) -> &LossRecord {
        self.log.last().expect("at least one iteration")
    }
}

/// Single-precision optimization run.
pub fn run_optimization(cfg: &RunConfig, lsr: &ImageBuffer, reference: &ImageBuffer) -> Result<RunOutput> {
    run_optimization_with::<f32>(cfg, lsr, reference, |_, _| {})
}

/// Runs `cfg.iterations` steps, calling `observe` after each one, and records
/// the losses of the iterations picked by [`RunConfig::logs_iteration`].
pub fn run_optimization_with<T: Real>(
    cfg: &RunConfig,
    lsr: &ImageBuffer,
    reference: &ImageBuffer,
    mut observe: impl FnMut(&Trainer<T>, &StepOutcome<T>),
) -> Result<RunOutput> {
    let mut trainer = Trainer::<T>::new(cfg, &lsr.to_tensor(), &reference.to_tensor())?;
    let mut log = Vec::new();
    let mut last = None;
    for i in 1..=cfg.iterations {
        let out = trainer.step()?;
        if cfg.logs_iteration(i) {
            log.push(LossRecord {
                iteration: i,
                loss_sr: out.loss_sr,
                loss_ref: out.loss_ref,
            });
        }
        observe(&trainer, &out);
        last = Some(out.sr);
    }
    let sr = ImageBuffer::from_tensor(&last.expect("iterations >= 1"), Role::Sr)?;
    Ok(RunOutput { sr, log })
}
