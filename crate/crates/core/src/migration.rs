//! Noise-prior migration: a Gaussian latent map built from the global
//! statistics of the reference features, mixed into the generator input.
//!
//! The Gaussian is evaluated elementwise at the initial noise values, so the
//! latent map always has the noise's shape. Updates are anchored to the initial
//! noise: `current = init + alpha * latent`, never accumulated.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{reduce_stats, Real, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.03;

/// Smallest reference-feature standard deviation accepted by [`latent_map`].
pub const MIN_FEATURE_STD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap<T> {
    pub values: Tensor<T>,
    pub source_mean: f64,
    pub source_std: f64,
}

impl<T: Real> LatentMap<T> {
    /// Peak of the Gaussian, `1 / (sqrt(2 pi) std)`.
    pub fn peak(&self) -> f64 {
        1.0 / ((2.0 * PI).sqrt() * self.source_std)
    }
}

pub fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / ((2.0 * PI).sqrt() * std)
}

pub fn latent_map<T: Real>(f_ref: &Tensor<T>, eval_points: &Tensor<T>) -> Result<LatentMap<T>> {
    let (mean, std) = reduce_stats(f_ref)?;
    if std <= MIN_FEATURE_STD {
        return Err(Error::DegenerateFeatures { std });
    }
    let values = eval_points.map(|x| T::of(gaussian_pdf(x.f64(), mean, std)));
    Ok(LatentMap {
        values,
        source_mean: mean,
        source_std: std,
    })
}

#[derive(Clone, Debug)]
pub struct NoiseState<T> {
    init: Tensor<T>,
    current: Tensor<T>,
    alpha: T,
    iteration: usize,
    latest: Option<LatentMap<T>>,
}

impl<T: Real> NoiseState<T> {
    pub fn new(init: Tensor<T>, alpha: f64) -> Self {
        NoiseState {
            current: init.clone(),
            init,
            alpha: T::of(alpha),
            iteration: 0,
            latest: None,
        }
    }

    pub fn init(&self) -> &Tensor<T> {
        &self.init
    }

    pub fn current(&self) -> &Tensor<T> {
        &self.current
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn latest(&self) -> Option<&LatentMap<T>> {
        self.latest.as_ref()
    }

    /// `current <- init + alpha * lm.values`; bumps the iteration counter.
    pub fn update(&mut self, lm: LatentMap<T>) -> Result<()> {
        if lm.values.shape() != self.init.shape() {
            return Err(Error::shape("update_noise", self.init.shape(), lm.values.shape()));
        }
        let alpha = self.alpha;
        for ((c, &n0), &f) in self
            .current
            .data_mut()
            .iter_mut()
            .zip(self.init.data())
            .zip(lm.values.data())
        {
            *c = n0 + alpha * f;
        }
        self.iteration += 1;
        self.latest = Some(lm);
        Ok(())
    }
}

/// Functional form of [`NoiseState::update`].
pub fn update_noise<T: Real>(mut state: NoiseState<T>, lm: LatentMap<T>) -> Result<NoiseState<T>> {
    state.update(lm)?;
    Ok(state)
}
