//! Channel-statistics feature perturbation.
//!
//! An intermediate feature `z` is perturbed as
//!
//! ```text
//! z' = alpha * z + delta * (beta - alpha) * mu_c
//! ```
//!
//! where `alpha, beta ~ N(1, sigma_n^2)` are per-(sample, channel) noises,
//! `mu_c` is the spatial channel mean, and `delta` scales the perturbation
//! per channel. The plain variant uses the current batch's normalized
//! variance of `mu_c`; the tracked variant replaces it with an exponential
//! moving average of the normalized standard deviation, held in [`AugState`].
//!
//! The noises, `mu_c` and `delta` are all treated as constants: gradient
//! reaches `z` only through the `alpha * z` term.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedSplitter};
use crate::tensor::{Tape, TensorId};

/// EMA of the normalized per-channel standard deviation, plus the noise
/// stream. Owned by one adaptation episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugState {
    /// Per-channel EMA of the normalized std of channel means; every entry
    /// stays in `[0, 1]`.
    pub delta_bar: Vec<f64>,
    /// EMA smoothing factor.
    pub lambda_ema: f64,
    /// Standard deviation of the perturbation noises.
    pub sigma_n: f64,
    pub initialized: bool,
    rng: ChaCha8Rng,
}

impl AugState {
    pub fn new(channels: usize, lambda_ema: f64, sigma_n: f64, seed: u64) -> Self {
        AugState {
            delta_bar: vec![0.0; channels],
            lambda_ema,
            sigma_n,
            initialized: false,
            rng: SeedSplitter::new(seed).rng(Purpose::Noise),
        }
    }

    /// Starts from an explicit, already-initialized EMA value.
    pub fn with_delta_bar(delta_bar: Vec<f64>, lambda_ema: f64, sigma_n: f64, seed: u64) -> Self {
        AugState {
            delta_bar,
            lambda_ema,
            sigma_n,
            initialized: true,
            rng: SeedSplitter::new(seed).rng(Purpose::Noise),
        }
    }

    pub fn channels(&self) -> usize {
        self.delta_bar.len()
    }

    /// EMA update. The first observation initializes the average; after
    /// that `delta_bar <- lambda * delta_bar + (1 - lambda) * observed`.
    pub fn observe(&mut self, delta_sigma: &[f64]) {
        debug_assert_eq!(delta_sigma.len(), self.delta_bar.len());
        if !self.initialized {
            self.delta_bar.copy_from_slice(delta_sigma);
            self.initialized = true;
            return;
        }
        let l = self.lambda_ema;
        for (bar, &d) in self.delta_bar.iter_mut().zip(delta_sigma.iter()) {
            *bar = l * *bar + (1.0 - l) * d;
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One draw of the perturbation noises, laid out `[B, C]` row-major.
#[derive(Clone, Debug)]
pub struct NoisePair {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Samples `alpha` then `beta`, each elementwise from `N(1, sigma_n^2)` in
/// row-major `[B, C]` order. `sigma_n = 0` yields exactly 1s.
pub fn sample_noise(rng: &mut impl Rng, batch: usize, channels: usize, sigma_n: f64) -> NoisePair {
    let dist = Normal::new(1.0, sigma_n).expect("sigma_n >= 0");
    let n = batch * channels;
    let alpha: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let beta: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    NoisePair { alpha, beta }
}

/// Spatial mean per (sample, channel): `[B, C, H, W] -> [B, C]`.
/// A `[B, C]` feature is its own channel mean.
pub fn channel_mean(tape: &mut Tape, z: TensorId) -> Result<TensorId> {
    match tape.shape(z).len() {
        2 => Ok(z),
        4 => tape.mean_axes(z, &[2, 3], false),
        r => Err(Error::ShapeMismatch {
            op: "channel_mean",
            details: format!("expected rank 2 or 4, got rank {r}"),
        }),
    }
}

/// Per-channel standard deviation of `mu` (`[B, C]`, row-major) over the
/// batch axis, normalized by its maximum. All entries land in `[0, 1]`;
/// a spread-free batch (including `B = 1`) yields zeros.
pub fn delta_sigma(mu: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    normalized_spread(mu, batch, channels, false)
}

/// As [`delta_sigma`] but with the variance, the plain-variant scaling.
pub fn normalized_variance(mu: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    normalized_spread(mu, batch, channels, true)
}

fn normalized_spread(mu: &[f64], batch: usize, channels: usize, squared: bool) -> Vec<f64> {
    debug_assert_eq!(mu.len(), batch * channels);
    let mut spread = vec![0.0; channels];
    for c in 0..channels {
        let mut m = 0.0;
        for b in 0..batch {
            m += mu[b * channels + c];
        }
        m /= batch as f64;
        let mut var = 0.0;
        for b in 0..batch {
            let d = mu[b * channels + c] - m;
            var += d * d;
        }
        var /= batch as f64;
        spread[c] = if squared { var } else { var.sqrt() };
    }
    let max = spread.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return spread; // all zeros
    }
    for s in &mut spread {
        *s /= max;
    }
    spread
}

/// Core perturbation with explicit noises: `z' = alpha z + delta (beta - alpha) mu_c`,
/// with `mu_c` broadcast over spatial positions and detached.
pub fn perturb_with_noise(
    tape: &mut Tape,
    z: TensorId,
    delta: &[f64],
    noise: &NoisePair,
) -> Result<TensorId> {
    let shape = tape.shape(z).to_vec();
    let (batch, channels) = (shape[0], shape[1]);
    if delta.len() != channels {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            details: format!("delta has {} entries for {channels} channels", delta.len()),
        });
    }
    if noise.alpha.len() != batch * channels {
        return Err(Error::ShapeMismatch {
            op: "perturb",
            details: format!(
                "noise has {} entries for batch {batch} x {channels} channels",
                noise.alpha.len()
            ),
        });
    }
    let mu = channel_mean(tape, z)?;
    let mu_sg = tape.stop_gradient(mu);

    // delta * (beta - alpha), a constant [B, C] coefficient
    let coef: Vec<f64> = (0..batch * channels)
        .map(|i| delta[i % channels] * (noise.beta[i] - noise.alpha[i]))
        .collect();

    let bc_shape: Vec<usize> = if shape.len() == 4 {
        vec![batch, channels, 1, 1]
    } else {
        vec![batch, channels]
    };
    let alpha_t = tape.constant(noise.alpha.clone(), &bc_shape)?;
    let coef_t = tape.constant(coef, &[batch, channels])?;

    let term1 = tape.mul(z, alpha_t)?;
    let term2 = tape.mul(coef_t, mu_sg)?;
    let term2 = if shape.len() == 4 {
        tape.reshape(term2, &[batch, channels, 1, 1])?
    } else {
        term2
    };
    tape.add(term1, term2)
}

/// Plain variant: scales by the current batch's normalized variance.
pub fn np_plus(
    tape: &mut Tape,
    z: TensorId,
    delta: &[f64],
    sigma_n: f64,
    rng: &mut impl Rng,
) -> Result<TensorId> {
    let shape = tape.shape(z);
    let noise = sample_noise(rng, shape[0], shape[1], sigma_n);
    perturb_with_noise(tape, z, delta, &noise)
}

/// Tracked variant: scales by the EMA `delta_bar`. An uninitialized state
/// acts as zeros, degenerating to pure channel scaling `z' = alpha z`.
pub fn fata_augment(tape: &mut Tape, z: TensorId, state: &mut AugState) -> Result<TensorId> {
    let shape = tape.shape(z).to_vec();
    if shape[1] != state.channels() {
        return Err(Error::ShapeMismatch {
            op: "fata_augment",
            details: format!(
                "feature has {} channels, state tracks {}",
                shape[1],
                state.channels()
            ),
        });
    }
    let sigma = state.sigma_n;
    let noise = sample_noise(&mut state.rng, shape[0], shape[1], sigma);
    let delta = state.delta_bar.clone();
    perturb_with_noise(tape, z, &delta, &noise)
}
