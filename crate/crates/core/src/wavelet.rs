//! Morlet-wavelet parameterization of an n-gram filter bank.
//!
//! Filter `k` on channel `c` is `alpha[k,c] cos(omega[k] t + phi[k,c]) exp(-beta[k] t^2)`
//! sampled on a fixed, centered, unit-spaced time grid of length `n`. The bank
//! costs `2KC + 2K` parameters regardless of `n`.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Result, RkmError};
use crate::grad::{ParamId, ParamStore, Tensor};
use crate::ngram::FilterBank;

/// `t_k = k - (n - 1) / 2`
pub fn centered_grid(n: usize) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    (0..n).map(|k| k as f64 - mid).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletParams {
    /// `[K x C]`
    pub alpha: Vec<f64>,
    /// `[K]`, radians per sample
    pub omega: Vec<f64>,
    /// `[K x C]`, radians
    pub phi: Vec<f64>,
    /// `[K]`, per sample squared
    pub beta: Vec<f64>,
    pub filters: usize,
    pub channels: usize,
    pub time_grid: Vec<f64>,
}

impl WaveletParams {
    pub fn new(
        filters: usize,
        channels: usize,
        alpha: Vec<f64>,
        omega: Vec<f64>,
        phi: Vec<f64>,
        beta: Vec<f64>,
        time_grid: Vec<f64>,
    ) -> Result<Self> {
        let kc = filters * channels;
        if kc == 0 || alpha.len() != kc || phi.len() != kc || omega.len() != filters || beta.len() != filters {
            return Err(RkmError::shape(
                "wavelet",
                format!("K={filters}, C={channels} does not match parameter lengths"),
            ));
        }
        if time_grid.is_empty() {
            return Err(RkmError::shape("wavelet", "empty time grid"));
        }
        Ok(WaveletParams {
            alpha,
            omega,
            phi,
            beta,
            filters,
            channels,
            time_grid,
        })
    }

    /// omega ~ U(0, pi/4), beta ~ U(0, 0.05), alpha ~ U(-0.1, 0.1), phi ~ U(-pi, pi).
    pub fn random<R: Rng>(filters: usize, channels: usize, n: usize, rng: &mut R) -> Self {
        let kc = filters * channels;
        let alpha = (0..kc).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let omega = (0..filters).map(|_| rng.gen_range(0.0..PI / 4.0)).collect();
        let phi = (0..kc).map(|_| rng.gen_range(-PI..PI)).collect();
        let beta = (0..filters).map(|_| rng.gen_range(0.0..0.05)).collect();
        WaveletParams {
            alpha,
            omega,
            phi,
            beta,
            filters,
            channels,
            time_grid: centered_grid(n),
        }
    }

    pub fn n(&self) -> usize {
        self.time_grid.len()
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.filters * self.channels + 2 * self.filters
    }

    /// Sample the closed form into a `K`-filter bank over `C` channels.
    pub fn materialize(&self, n: usize) -> Result<FilterBank> {
        if n != self.n() {
            return Err(RkmError::shape(
                "materialize",
                format!("window length {n} but time grid has {} points", self.n()),
            ));
        }
        warn_negative_beta(&self.beta);
        let (k, c) = (self.filters, self.channels);
        let mut bank = FilterBank::zeros(k, c, n);
        for i in 0..k {
            for lag in 0..n {
                // lag 0 is the newest input and meets the last grid point
                let t = self.time_grid[n - 1 - lag];
                let env = (-self.beta[i] * t * t).exp();
                for ch in 0..c {
                    *bank.at_mut(i, lag, ch) = self.alpha[i * c + ch] * (self.omega[i] * t + self.phi[i * c + ch]).cos() * env;
                }
            }
        }
        Ok(bank)
    }
}

pub(crate) fn warn_negative_beta(beta: &[f64]) {
    if let Some(b) = beta.iter().find(|&&b| b < 0.0) {
        log::warn!("wavelet decay beta = {b} is negative; the filter envelope grows with |t|");
    }
}

/// Parameter handles for a wavelet bank registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WaveletIds {
    pub alpha: ParamId,
    pub omega: ParamId,
    pub phi: ParamId,
    pub beta: ParamId,
}

impl WaveletIds {
    pub fn register(store: &mut ParamStore, prefix: &str, p: &WaveletParams) -> Result<Self> {
        let (k, c) = (p.filters, p.channels);
        Ok(WaveletIds {
            alpha: store.add(format!("{prefix}.alpha"), Tensor::new(vec![k, c], p.alpha.clone())?, true)?,
            omega: store.add(format!("{prefix}.omega"), Tensor::new(vec![k], p.omega.clone())?, true)?,
            phi: store.add(format!("{prefix}.phi"), Tensor::new(vec![k, c], p.phi.clone())?, true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::new(vec![k], p.beta.clone())?, true)?,
        })
    }

    pub fn read(&self, store: &ParamStore, time_grid: &[f64]) -> Result<WaveletParams> {
        let shape = store.param(self.alpha).value.shape();
        WaveletParams::new(
            shape[0],
            shape[1],
            store.param(self.alpha).value.data().to_vec(),
            store.param(self.omega).value.data().to_vec(),
            store.param(self.phi).value.data().to_vec(),
            store.param(self.beta).value.data().to_vec(),
            time_grid.to_vec(),
        )
    }
}
