//! Channel model, calibration pipeline, and noise model for a
//! sprayed-chemical communication link read by a metal-oxide gas sensor.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`] — the closed-form pieces: advection–diffusion concentration
//!   kernel, sensor power law, the composed end-to-end response, the linear
//!   coefficient surfaces over `(distance, spray duration, voltage)`, and the
//!   built-in reference calibration.
//! * [`estimate`] — nonlinear least-squares trace fitting and the five-stage
//!   calibration pipeline that turns a trace dataset into surfaces.
//! * [`noise`] — the per-trace amplitude-noise model: one Gaussian draw per
//!   trace whose standard deviation comes from the σ surface.
//! * [`dataset`] — trace/surfaces file formats, the measurement-campaign
//!   parameter grid, and synthetic dataset generation.
//!
//! Commonly used items are re-exported at the crate root.

pub mod dataset;
pub mod error;
pub mod estimate;
pub mod model;
pub mod noise;

pub use dataset::{
    derive_trace_seed, enumerate_grid, generate_dataset, mean_trace, parse_surfaces, parse_trace,
    write_surfaces, write_trace, ParameterGrid, AGGREGATE_TRIAL_ID,
};
pub use error::{Error, Result};
pub use estimate::{
    aggregate_coefficients, calibrate, compute_b_star, fit_channel, fit_channel_fixed_b,
    fit_linear_surfaces, predict_trace, rmse, CalibrationResult, CoefficientRow, CoefficientTable,
    FitOptions, FitResult, SurfaceResiduals, Trace, TraceFitRecord,
};
pub use model::{
    concentration, concentration_kernel, estimate_power_law_exponent, impulse_response,
    legacy_response, peak_time, resistance_from_concentration, universal_response,
    ChannelCoefficients, CoefficientSurfaces, ConcentrationParams, EvaluationOptions, SensorParams,
    SigmaValue, SurfaceBetas, SystemConfig, VelocityBetas, REFERENCE_SURFACES, SENSOR_EXPONENT,
    SIGMA_EPSILON,
};
pub use noise::{
    generate_noisy_trace, noise_sample, noise_stats, sample_noise, NoiseDistribution,
    NoiseSampleSet, NoiseSpec,
};
