//! The amplitude-noise model.
//!
//! Repeated trials at one system config differ mainly in overall level, not
//! in shape: the trace family is `O_i(t) = (f(d,s,ν) + N) · kernel(t)^(−0.65)`
//! with a single random scalar `N` perturbing the amplitude per trial. `N` is
//! extracted from a trial's fitted amplitude as `N = a_fit − f(d,s,ν)`; its
//! mean is zero by construction and its standard deviation follows the linear
//! surface `σ = L(d,s,ν)`.
//!
//! Only the first two moments of `N` are known, so generation uses a Gaussian
//! (the maximum-entropy choice), with the distribution kept behind a tag for
//! future variants. Two clamps keep generated physics meaningful: σ never
//! drops below `sigma_floor` (the linear surface extrapolates below zero at
//! one corner of the calibrated box), and `f + N` never drops below
//! `amplitude_floor` (a non-positive amplitude has no physical reading).
//!
//! Every randomized operation takes an explicit seed and is bit-reproducible
//! from it; nothing here touches global RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::estimate::Trace;
use crate::model::{response_unchecked, CoefficientSurfaces, EvaluationOptions, SystemConfig};

// ====================================================================
// Domain types
// ====================================================================

/// Shape of the amplitude-noise distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseDistribution {
    /// Zero-mean normal draws — the default, as only mean and standard
    /// deviation of the noise are known.
    #[default]
    Gaussian,
}

/// Everything needed to draw amplitude noise: the surfaces supplying
/// `f(d,s,ν)` and `σ = L(d,s,ν)` plus the guard levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Coefficient surfaces supplying the amplitude and σ laws.
    pub surfaces: CoefficientSurfaces,
    /// Distribution of the amplitude perturbation.
    pub distribution: NoiseDistribution,
    /// Smallest standard deviation ever used for drawing; > 0.
    pub sigma_floor: f64,
    /// Smallest amplitude `f + N` may reach before being clamped; > 0.
    pub amplitude_floor: f64,
    /// Forces σ to exactly 0 (no draw at all), for noiseless synthetic data.
    /// This is a switch rather than a floor value because the floors must
    /// stay positive.
    pub sigma_zero: bool,
}

impl NoiseSpec {
    /// Spec with default guards: `sigma_floor = 10⁻⁶`,
    /// `amplitude_floor = 10⁻³`, Gaussian noise enabled.
    pub fn new(surfaces: CoefficientSurfaces) -> Self {
        NoiseSpec {
            surfaces,
            distribution: NoiseDistribution::Gaussian,
            sigma_floor: 1e-6,
            amplitude_floor: 1e-3,
            sigma_zero: false,
        }
    }

    /// Checks the surfaces and guard levels.
    pub fn validate(&self) -> Result<()> {
        self.surfaces.validate()?;
        if !self.sigma_floor.is_finite() || self.sigma_floor <= 0.0 {
            return Err(Error::input(format!(
                "sigma_floor must be a positive finite number, got {}",
                self.sigma_floor
            )));
        }
        if !self.amplitude_floor.is_finite() || self.amplitude_floor <= 0.0 {
            return Err(Error::input(format!(
                "amplitude_floor must be a positive finite number, got {}",
                self.amplitude_floor
            )));
        }
        Ok(())
    }

    /// The standard deviation used when drawing at a config: exactly 0 when
    /// `sigma_zero` is set, otherwise the clamped σ surface value floored at
    /// `sigma_floor`.
    pub fn sigma_for(&self, config: &SystemConfig) -> f64 {
        if self.sigma_zero {
            0.0
        } else {
            self.surfaces.sigma_at(config).value.max(self.sigma_floor)
        }
    }
}

/// A batch of amplitude-noise draws at one config.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSampleSet {
    /// The noise scalars.
    pub samples: Vec<f64>,
    /// The config they were drawn at.
    pub config: SystemConfig,
}

// ====================================================================
// Operations
// ====================================================================

/// Noise scalar carried by one trial: the fitted amplitude minus the
/// amplitude surface's value, `N = a_fit − f(d,s,ν)`.
pub fn noise_sample(a_fit: f64, config: &SystemConfig, surfaces: &CoefficientSurfaces) -> f64 {
    a_fit - surfaces.amplitude_at(config)
}

/// One fresh Gaussian draw from a seed. σ is validated positive and finite by
/// the callers, so the distribution constructor cannot fail.
fn gaussian_draw(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    normal.sample(rng)
}

/// Draws `count` independent zero-mean noise scalars with the config's
/// standard deviation, bit-reproducibly from `rng_seed`.
///
/// # Errors
/// Input error when `count` is 0 or the spec is invalid.
pub fn sample_noise(
    config: &SystemConfig,
    spec: &NoiseSpec,
    rng_seed: u64,
    count: usize,
) -> Result<NoiseSampleSet> {
    spec.validate()?;
    if count < 1 {
        return Err(Error::input("count must be at least 1"));
    }
    let sigma = spec.sigma_for(config);
    let samples = if sigma == 0.0 {
        vec![0.0; count]
    } else {
        match spec.distribution {
            NoiseDistribution::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                (0..count).map(|_| gaussian_draw(&mut rng, sigma)).collect()
            }
        }
    };
    Ok(NoiseSampleSet {
        samples,
        config: *config,
    })
}

/// Generates one randomized trial at a config: a single noise scalar `N` is
/// drawn (the noise perturbs the amplitude once per trial, not per sample),
/// the amplitude `f + N` is clamped at `spec.amplitude_floor`, and the
/// response is evaluated at every requested time with the default evaluation
/// guards.
///
/// With `sigma_zero` set, no RNG state is created at all and the trace equals
/// the surface prediction exactly. The returned trace carries `trial_id = 0`;
/// dataset generation assigns real trial numbers.
///
/// # Errors
/// Input error when any time is non-finite or below the model's earliest
/// defined time, or when the spec is invalid.
pub fn generate_noisy_trace(
    config: &SystemConfig,
    spec: &NoiseSpec,
    times: &[f64],
    rng_seed: u64,
) -> Result<Trace> {
    spec.validate()?;
    let eval = EvaluationOptions::default();
    for (i, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < eval.t_min {
            return Err(Error::input(format!(
                "time {t} at sample {i} is below the model's earliest defined time {}",
                eval.t_min
            )));
        }
    }

    let f = spec.surfaces.amplitude_at(config);
    let sigma = spec.sigma_for(config);
    let noise = if sigma == 0.0 {
        0.0
    } else {
        match spec.distribution {
            NoiseDistribution::Gaussian => {
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                gaussian_draw(&mut rng, sigma)
            }
        }
    };
    let mut amplitude = f + noise;
    if amplitude < spec.amplitude_floor {
        log::debug!(
            "amplitude {amplitude} at (d={} m, s={} ms, v={} V) clamped to the floor {}",
            config.distance_m,
            config.spray_ms,
            config.init_voltage_v,
            spec.amplitude_floor
        );
        amplitude = spec.amplitude_floor;
    }

    let b = spec.surfaces.b_star;
    let c = spec.surfaces.velocity_at(config);
    let values = times
        .iter()
        .map(|&t| response_unchecked(t, amplitude, b, c, config.distance_m, &eval))
        .collect();
    Trace::new(times.to_vec(), values, *config, 0)
}

/// Sample mean and sample standard deviation (n−1 denominator) of a noise
/// batch.
///
/// # Errors
/// Input error with fewer than 2 samples — a single draw has no spread.
pub fn noise_stats(samples: &NoiseSampleSet) -> Result<(f64, f64)> {
    let n = samples.samples.len();
    if n < 2 {
        return Err(Error::input(format!(
            "need at least 2 samples for a standard deviation, got {n}"
        )));
    }
    let mean = samples.samples.iter().sum::<f64>() / n as f64;
    let ss: f64 = samples
        .samples
        .iter()
        .map(|x| (x - mean) * (x - mean))
        .sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

// ====================================================================
// Tests
// ====================================================================
