//! Analytical channel model for a sprayed-chemical link read by a metal-oxide
//! gas sensor.
//!
//! A transmitter sprays a short burst of messenger molecules (isopropyl
//! alcohol) into a fan-driven airflow; a heated tin-dioxide sensor at distance
//! `d` reports a resistance-like reading as the puff drifts past. Two physical
//! pieces combine into one end-to-end response:
//!
//! * **Propagation** — a one-dimensional advection–diffusion impulse:
//!   `kernel(t) = d/√(4πbt³) · exp(−(d−ct)²/(4bt))`, where `b` is an effective
//!   diffusion coefficient and `c` an effective drift velocity. The kernel is
//!   proportional to the concentration at the sensor.
//!
//! * **Sensing** — the metal-oxide power law `R ∝ C^n` with `n = −0.65`
//!   ([`SENSOR_EXPONENT`]): resistance falls as concentration rises.
//!
//! Composing the two gives the response family fitted throughout this crate:
//!
//! ```text
//! h(t; a, b, c) = a · kernel(t; d, b, c)^(−0.65)
//! ```
//!
//! with a single amplitude `a` absorbing molecule count, sensor constant, and
//! readout circuit. On top of the per-trace coefficients sit three linear
//! *coefficient surfaces* over the system parameters (distance `d` in meters,
//! spray duration `s` in milliseconds, initial sensor voltage `ν` in volts):
//! the amplitude surface `a(d,s,ν)`, the velocity surface `c(d,ν)` (spray
//! duration measurably does not move the drift velocity), and the noise
//! standard-deviation surface `σ(d,s,ν)`. The diffusion coefficient is held at
//! a single calibrated [`CoefficientSurfaces::b_star`].
//!
//! Everything here is a pure function of its arguments; units are seconds,
//! meters, milliseconds, and volts as noted per field.

use crate::error::{ensure_finite, ensure_positive, Error, Result};

// ====================================================================
// Constants
// ====================================================================

/// Default exponent of the sensor power law `R = a₁·C^n` for the target
/// chemical: the slope of the sensitivity line in log-log axes.
pub const SENSOR_EXPONENT: f64 = -0.65;

/// Smallest standard deviation the noise surface may report. The linear
/// σ surface extrapolates below zero at corners of the calibrated box; a
/// standard deviation must stay positive, so evaluations clamp here and flag.
pub const SIGMA_EPSILON: f64 = 1e-6;

/// Calibrated-box bounds: distance in meters.
pub const HULL_DISTANCE_M: (f64, f64) = (2.0, 5.0);
/// Calibrated-box bounds: spray duration in milliseconds.
pub const HULL_SPRAY_MS: (f64, f64) = (50.0, 200.0);
/// Calibrated-box bounds: initial sensor voltage in volts.
pub const HULL_VOLTAGE_V: (f64, f64) = (1.0, 1.9);

/// The built-in reference calibration: coefficient surfaces estimated on the
/// published 2–5 m / 50–200 ms / 1.0–1.9 V measurement campaign (640 trials).
/// Loadable on the command line as `--surfaces paper`.
pub const REFERENCE_SURFACES: CoefficientSurfaces = CoefficientSurfaces {
    amplitude: SurfaceBetas {
        beta_d: -0.4188,
        beta_s: 0.0098,
        beta_v: -1.7873,
        beta_0: 4.6469,
    },
    velocity: VelocityBetas {
        beta_d: 0.0709,
        beta_v: 0.1362,
        beta_0: -0.0427,
    },
    sigma: SurfaceBetas {
        beta_d: -0.1258,
        beta_s: 0.0014,
        beta_v: -0.2403,
        beta_0: 0.9738,
    },
    b_star: 0.1950,
};

// ====================================================================
// Domain types
// ====================================================================

/// The experiment knobs: where the sensor sits and how the burst is sprayed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemConfig {
    /// Transmitter-to-sensor distance in meters.
    pub distance_m: f64,
    /// Spray-valve open time in milliseconds.
    pub spray_ms: f64,
    /// Sensor baseline voltage before transmission, in volts.
    pub init_voltage_v: f64,
}

impl SystemConfig {
    /// Builds a config, requiring every knob to be finite and positive.
    pub fn new(distance_m: f64, spray_ms: f64, init_voltage_v: f64) -> Result<Self> {
        ensure_positive("distance_m", distance_m)?;
        ensure_positive("spray_ms", spray_ms)?;
        ensure_positive("init_voltage_v", init_voltage_v)?;
        Ok(SystemConfig {
            distance_m,
            spray_ms,
            init_voltage_v,
        })
    }

    /// True when the config lies inside the calibrated box
    /// (2–5 m, 50–200 ms, 1.0–1.9 V, all inclusive). Outside it the
    /// coefficient surfaces extrapolate and callers should report that.
    pub fn in_calibrated_hull(&self) -> bool {
        let (dlo, dhi) = HULL_DISTANCE_M;
        let (slo, shi) = HULL_SPRAY_MS;
        let (vlo, vhi) = HULL_VOLTAGE_V;
        self.distance_m >= dlo
            && self.distance_m <= dhi
            && self.spray_ms >= slo
            && self.spray_ms <= shi
            && self.init_voltage_v >= vlo
            && self.init_voltage_v <= vhi
    }
}

/// The per-trace response coefficients `(a, b, c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCoefficients {
    /// Amplitude `a` in observation units.
    pub amplitude: f64,
    /// Effective diffusion coefficient `b` (m²/s-like).
    pub diffusion: f64,
    /// Effective drift velocity `c` (m/s-like); may be negative.
    pub velocity: f64,
}

impl ChannelCoefficients {
    /// Builds a coefficient triple, requiring `a > 0`, `b > 0`, and finite `c`.
    pub fn new(amplitude: f64, diffusion: f64, velocity: f64) -> Result<Self> {
        ensure_positive("amplitude", amplitude)?;
        ensure_positive("diffusion", diffusion)?;
        ensure_finite("velocity", velocity)?;
        Ok(ChannelCoefficients {
            amplitude,
            diffusion,
            velocity,
        })
    }
}

/// Physical parameters of the raw advection–diffusion concentration formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationParams {
    /// Number of released molecules `M` (dimensionless scale).
    pub molecule_count: f64,
    /// Diffusion coefficient `D`.
    pub diffusion: f64,
    /// Wind-flow velocity `v`.
    pub velocity: f64,
    /// Distance to the sensor in meters.
    pub distance_m: f64,
}

impl ConcentrationParams {
    /// Validates `M > 0`, `D > 0`, `d > 0`, finite `v`.
    pub fn new(
        molecule_count: f64,
        diffusion: f64,
        velocity: f64,
        distance_m: f64,
    ) -> Result<Self> {
        ensure_positive("molecule_count", molecule_count)?;
        ensure_positive("diffusion", diffusion)?;
        ensure_finite("velocity", velocity)?;
        ensure_positive("distance_m", distance_m)?;
        Ok(ConcentrationParams {
            molecule_count,
            diffusion,
            velocity,
            distance_m,
        })
    }
}

/// Parameters of the sensor power law `R = a₁·C^n` and its normalized form
/// `R/R₀ = a₂·C^n` with `a₂ = a₁/R₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorParams {
    /// Scale constant `a₁` (ohm-like).
    pub scale: f64,
    /// Power-law exponent `n`; negative for reducing gases.
    pub exponent: f64,
    /// Reference resistance `R₀` used to normalize readings.
    pub reference_resistance: f64,
}

impl SensorParams {
    /// Validates `a₁ > 0`, `R₀ > 0`, finite exponent.
    pub fn new(scale: f64, exponent: f64, reference_resistance: f64) -> Result<Self> {
        ensure_positive("scale", scale)?;
        ensure_finite("exponent", exponent)?;
        ensure_positive("reference_resistance", reference_resistance)?;
        Ok(SensorParams {
            scale,
            exponent,
            reference_resistance,
        })
    }

    /// Normalized scale `a₂ = a₁/R₀`.
    pub fn normalized_scale(&self) -> f64 {
        self.scale / self.reference_resistance
    }
}

impl Default for SensorParams {
    /// Unit scale and reference, exponent [`SENSOR_EXPONENT`].
    fn default() -> Self {
        SensorParams {
            scale: 1.0,
            exponent: SENSOR_EXPONENT,
            reference_resistance: 1.0,
        }
    }
}

/// Regression constants of a plane over `(d, s, ν)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceBetas {
    /// Slope per meter of distance.
    pub beta_d: f64,
    /// Slope per millisecond of spray duration.
    pub beta_s: f64,
    /// Slope per volt of initial voltage.
    pub beta_v: f64,
    /// Intercept.
    pub beta_0: f64,
}

impl SurfaceBetas {
    /// Evaluates the plane at a config.
    pub fn eval(&self, config: &SystemConfig) -> f64 {
        self.beta_d * config.distance_m
            + self.beta_s * config.spray_ms
            + self.beta_v * config.init_voltage_v
            + self.beta_0
    }
}

/// Regression constants of a plane over `(d, ν)` — the velocity surface has
/// no spray-duration term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityBetas {
    /// Slope per meter of distance.
    pub beta_d: f64,
    /// Slope per volt of initial voltage.
    pub beta_v: f64,
    /// Intercept.
    pub beta_0: f64,
}

impl VelocityBetas {
    /// Evaluates the plane at a config.
    pub fn eval(&self, config: &SystemConfig) -> f64 {
        self.beta_d * config.distance_m + self.beta_v * config.init_voltage_v + self.beta_0
    }
}

/// A noise standard deviation together with whether the positivity clamp at
/// [`SIGMA_EPSILON`] fired.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaValue {
    /// The usable standard deviation, always ≥ [`SIGMA_EPSILON`].
    pub value: f64,
    /// True when the raw linear surface value was below the clamp.
    pub clamped: bool,
}

/// The full calibration product: three coefficient planes plus the shared
/// diffusion coefficient `b*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSurfaces {
    /// Amplitude surface `a(d, s, ν)`.
    pub amplitude: SurfaceBetas,
    /// Velocity surface `c(d, ν)`.
    pub velocity: VelocityBetas,
    /// Noise standard-deviation surface `σ(d, s, ν)` (clamped on evaluation).
    pub sigma: SurfaceBetas,
    /// Calibrated diffusion coefficient shared by every config; > 0.
    pub b_star: f64,
}

impl CoefficientSurfaces {
    /// Validates `b_star > 0` and that every beta is finite.
    pub fn validate(&self) -> Result<()> {
        ensure_positive("b_star", self.b_star)?;
        for (name, v) in [
            ("amplitude beta_d", self.amplitude.beta_d),
            ("amplitude beta_s", self.amplitude.beta_s),
            ("amplitude beta_v", self.amplitude.beta_v),
            ("amplitude beta_0", self.amplitude.beta_0),
            ("velocity beta_d", self.velocity.beta_d),
            ("velocity beta_v", self.velocity.beta_v),
            ("velocity beta_0", self.velocity.beta_0),
            ("sigma beta_d", self.sigma.beta_d),
            ("sigma beta_s", self.sigma.beta_s),
            ("sigma beta_v", self.sigma.beta_v),
            ("sigma beta_0", self.sigma.beta_0),
        ] {
            ensure_finite(name, v)?;
        }
        Ok(())
    }

    /// Amplitude `a` implied by the surfaces at a config. Unclamped: the
    /// linear surface may extrapolate below zero outside (and at one corner
    /// of) the calibrated box.
    pub fn amplitude_at(&self, config: &SystemConfig) -> f64 {
        self.amplitude.eval(config)
    }

    /// Drift velocity `c` implied by the surfaces at a config.
    pub fn velocity_at(&self, config: &SystemConfig) -> f64 {
        self.velocity.eval(config)
    }

    /// Noise standard deviation at a config, clamped to stay positive.
    pub fn sigma_at(&self, config: &SystemConfig) -> SigmaValue {
        let raw = self.sigma.eval(config);
        if raw < SIGMA_EPSILON {
            SigmaValue {
                value: SIGMA_EPSILON,
                clamped: true,
            }
        } else {
            SigmaValue {
                value: raw,
                clamped: false,
            }
        }
    }

    /// Coefficient triple `(a, b*, c)` implied at a config, as used by the
    /// universal response. Built without positivity validation because the
    /// amplitude surface may legitimately extrapolate below zero.
    pub fn coefficients_at(&self, config: &SystemConfig) -> ChannelCoefficients {
        ChannelCoefficients {
            amplitude: self.amplitude_at(config),
            diffusion: self.b_star,
            velocity: self.velocity_at(config),
        }
    }
}

/// Evaluation guards for the response family, which diverges as `t → 0⁺`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluationOptions {
    /// Earliest time the model is defined at, in seconds. Physical readings
    /// right at spray onset are dominated by transients the model ignores.
    pub t_min: f64,
    /// Largest response value ever returned; the kernel walls would otherwise
    /// overflow any plot or fit. Real sensor voltages are bounded anyway.
    pub response_cap: f64,
    /// Kernel values below this are treated as a vanished puff: the response
    /// is reported as `response_cap` directly instead of overflowing.
    pub underflow_floor: f64,
}

impl EvaluationOptions {
    /// Checks option consistency.
    pub fn validate(&self) -> Result<()> {
        ensure_positive("t_min", self.t_min)?;
        ensure_positive("response_cap", self.response_cap)?;
        ensure_positive("underflow_floor", self.underflow_floor)?;
        Ok(())
    }
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions {
            t_min: 0.1,
            response_cap: 1e6,
            underflow_floor: 1e-30,
        }
    }
}

// ====================================================================
// Operations
// ====================================================================

/// Raw kernel evaluation with no argument checks; callers guarantee
/// `t > 0`, `d > 0`, `b > 0`.
#[inline]
pub(crate) fn kernel_unchecked(t: f64, d: f64, b: f64, c: f64) -> f64 {
    let four_bt = 4.0 * b * t;
    let drift = d - c * t;
    d / (std::f64::consts::PI * four_bt * t * t).sqrt() * (-drift * drift / four_bt).exp()
}

/// Response evaluation with no argument checks: `a · kernel^(−0.65)`, with the
/// underflow/cap guards of `opts` applied.
#[inline]
pub(crate) fn response_unchecked(
    t: f64,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    opts: &EvaluationOptions,
) -> f64 {
    let kernel = kernel_unchecked(t, d, b, c);
    if kernel < opts.underflow_floor {
        return opts.response_cap;
    }
    let raw = a * kernel.powf(SENSOR_EXPONENT);
    if raw > opts.response_cap {
        opts.response_cap
    } else {
        raw
    }
}

/// The advection–diffusion impulse kernel
/// `d/√(4πbt³) · exp(−(d−ct)²/(4bt))` — the concentration shape at the
/// sensor, normalized to one released molecule.
///
/// Always finite and ≥ 0 (it underflows to exactly 0 deep in the Gaussian
/// tails).
///
/// # Errors
/// Domain error when `t`, `d`, or `b` is not a finite positive number, or
/// `c` is not finite.
pub fn concentration_kernel(t: f64, distance_m: f64, diffusion: f64, velocity: f64) -> Result<f64> {
    ensure_positive("t", t)?;
    ensure_positive("distance_m", distance_m)?;
    ensure_positive("diffusion", diffusion)?;
    ensure_finite("velocity", velocity)?;
    Ok(kernel_unchecked(t, distance_m, diffusion, velocity))
}

/// End-to-end impulse response `h(t) = a · kernel(t)^(−0.65)`.
///
/// The kernel walls (puff not yet arrived, or long gone) drive the power law
/// toward infinity; when the kernel drops below `opts.underflow_floor` the
/// response is reported as `opts.response_cap`, and any finite value is capped
/// there too, so the result never exceeds `opts.response_cap`.
///
/// Away from the guards the response is homogeneous of degree 1 in the
/// amplitude `a`.
///
/// # Errors
/// Domain error when `t < opts.t_min` (the model is not defined near spray
/// onset) or any argument is invalid.
pub fn impulse_response(
    t: f64,
    coeffs: &ChannelCoefficients,
    distance_m: f64,
    opts: &EvaluationOptions,
) -> Result<f64> {
    opts.validate()?;
    if !t.is_finite() || t < opts.t_min {
        return Err(Error::domain(format!(
            "t = {t} is below the model's earliest defined time t_min = {}",
            opts.t_min
        )));
    }
    ensure_positive("distance_m", distance_m)?;
    ensure_finite("amplitude", coeffs.amplitude)?;
    ensure_positive("diffusion", coeffs.diffusion)?;
    ensure_finite("velocity", coeffs.velocity)?;
    Ok(response_unchecked(
        t,
        coeffs.amplitude,
        coeffs.diffusion,
        coeffs.velocity,
        distance_m,
        opts,
    ))
}

/// Response at a system config through the coefficient surfaces: identical to
/// [`impulse_response`] with `a = amplitude_at(config)`, `b = b_star`,
/// `c = velocity_at(config)`.
///
/// # Errors
/// As [`impulse_response`]; additionally validates the surfaces.
pub fn universal_response(
    t: f64,
    config: &SystemConfig,
    surfaces: &CoefficientSurfaces,
    opts: &EvaluationOptions,
) -> Result<f64> {
    surfaces.validate()?;
    impulse_response(
        t,
        &surfaces.coefficients_at(config),
        config.distance_m,
        opts,
    )
}

/// The earlier correction-factor response form `(a/√t³)·exp(−b(d−ct)²/t)`,
/// kept for comparison fits. Note its `b` multiplies the exponent (a decay
/// factor), unlike the diffusion coefficient of [`concentration_kernel`].
///
/// # Errors
/// Domain error when `t ≤ 0` or `b ≤ 0`.
pub fn legacy_response(
    t: f64,
    scale: f64,
    decay: f64,
    velocity: f64,
    distance_m: f64,
) -> Result<f64> {
    ensure_positive("t", t)?;
    ensure_finite("scale", scale)?;
    ensure_positive("decay", decay)?;
    ensure_finite("velocity", velocity)?;
    ensure_finite("distance_m", distance_m)?;
    let drift = distance_m - velocity * t;
    Ok(scale / (t * t * t).sqrt() * (-decay * drift * drift / t).exp())
}

/// Molecule concentration at the sensor:
/// `M·d/√(4πDt³)·exp(−(d−vt)²/(4Dt))`. Linear in the molecule count `M`;
/// equals [`concentration_kernel`] when `M = 1`.
///
/// # Errors
/// Domain error when `t ≤ 0` or the params are invalid.
pub fn concentration(t: f64, params: &ConcentrationParams) -> Result<f64> {
    ensure_positive("t", t)?;
    ensure_positive("molecule_count", params.molecule_count)?;
    ensure_positive("diffusion", params.diffusion)?;
    ensure_finite("velocity", params.velocity)?;
    ensure_positive("distance_m", params.distance_m)?;
    Ok(params.molecule_count
        * kernel_unchecked(t, params.distance_m, params.diffusion, params.velocity))
}

/// Sensor power law `R = a₁·C^n`. Strictly decreasing in `C` when `n < 0`.
///
/// # Errors
/// Domain error when `C ≤ 0` (the power law is undefined there — the sensor
/// model requires a positive concentration).
pub fn resistance_from_concentration(concentration: f64, params: &SensorParams) -> Result<f64> {
    if !concentration.is_finite() || concentration <= 0.0 {
        return Err(Error::domain(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    ensure_positive("scale", params.scale)?;
    ensure_finite("exponent", params.exponent)?;
    Ok(params.scale * concentration.powf(params.exponent))
}

/// Least-squares slope of `log(ratio)` against `log(concentration)` — the way
/// the sensor exponent `n` is read off a sensitivity plot in log-log axes.
///
/// `points` are `(concentration, resistance-ratio)` pairs.
///
/// # Errors
/// Domain error with fewer than 2 points, any non-positive coordinate, or all
/// concentrations identical (the slope is undefined for a vertical line).
pub fn estimate_power_law_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::domain(format!(
            "need at least 2 points to estimate a slope, got {}",
            points.len()
        )));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(concentration, ratio) in points {
        if !concentration.is_finite() || concentration <= 0.0 {
            return Err(Error::domain(format!(
                "concentration must be positive, got {concentration}"
            )));
        }
        if !ratio.is_finite() || ratio <= 0.0 {
            return Err(Error::domain(format!(
                "resistance ratio must be positive, got {ratio}"
            )));
        }
        xs.push(concentration.ln());
        ys.push(ratio.ln());
    }
    let n = xs.len() as f64;
    let x_mean = xs.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut ss_xx = 0.0;
    let mut ss_xy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        ss_xx += (x - x_mean) * (x - x_mean);
        ss_xy += (x - x_mean) * (y - y_mean);
    }
    if ss_xx == 0.0 {
        return Err(Error::domain(
            "all concentration values are identical; slope is undefined".to_string(),
        ));
    }
    Ok(ss_xy / ss_xx)
}

/// Time at which the kernel peaks (equivalently, the response dips, since
/// `x^(−0.65)` is decreasing).
///
/// Setting `d/dt ln kernel = 0` gives `c²t² + 6bt − d² = 0`, whose positive
/// root is returned in the cancellation-free form
///
/// ```text
/// t* = d² / (3b + √(9b² + c²d²))
/// ```
///
/// which also covers `c = 0` exactly (`t* = d²/6b`).
///
/// # Errors
/// Domain error when `b ≤ 0` or `d ≤ 0`.
pub fn peak_time(diffusion: f64, velocity: f64, distance_m: f64) -> Result<f64> {
    ensure_positive("diffusion", diffusion)?;
    ensure_finite("velocity", velocity)?;
    ensure_positive("distance_m", distance_m)?;
    let b = diffusion;
    let cd = velocity * distance_m;
    Ok(distance_m * distance_m / (3.0 * b + (9.0 * b * b + cd * cd).sqrt()))
}

// ====================================================================
// Tests
// ====================================================================

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-9;

    fn close(actual: f64, expected: f64, tol: f64) -> bool {
        (actual - expected).abs() <= tol
    }

    #[test]
    fn kernel_matches_high_precision_value() {
        let k = concentration_kernel(10.0, 2.0, 0.195, 0.27616).unwrap();
        assert!(
            close(k, 0.037506983850403737, TOL),
            "kernel value drifted: {k}"
        );
    }

    #[test]
    fn kernel_at_drift_arrival_time_has_unit_exponential() {
        // At t = d/c the Gaussian argument vanishes and only the prefactor
        // d/sqrt(4 pi b t^3) remains.
        let d = 2.0;
        let b = 0.195;
        let c = 0.4;
        let t = d / c;
        let k = concentration_kernel(t, d, b, c).unwrap();
        let prefactor = d / (4.0 * std::f64::consts::PI * b * t * t * t).sqrt();
        assert_eq!(k, prefactor);
        assert!(close(k, 0.11427540035147043, TOL));
    }

    #[test]
    fn kernel_underflows_in_the_far_tail() {
        let k = concentration_kernel(1e6, 2.0, 0.195, 0.3).unwrap();
        assert!(k < 1e-30, "tail value should underflow, got {k}");
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(matches!(
            concentration_kernel(0.0, 2.0, 0.195, 0.3),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            concentration_kernel(1.0, -2.0, 0.195, 0.3),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            concentration_kernel(1.0, 2.0, 0.0, 0.3),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn response_matches_high_precision_value() {
        let coeffs = ChannelCoefficients::new(2.95581, 0.1950, 0.27616).unwrap();
        let opts = EvaluationOptions::default();
        let h = impulse_response(10.0, &coeffs, 2.0, &opts).unwrap();
        assert!(close(h, 24.97489218826349, TOL), "response drifted: {h}");
    }

    #[test]
    fn response_scales_linearly_in_amplitude() {
        let opts = EvaluationOptions::default();
        for k in [0.25, 1.0, 3.0, 17.5] {
            let unit = ChannelCoefficients::new(1.0, 0.2, 0.3).unwrap();
            let scaled = ChannelCoefficients::new(k, 0.2, 0.3).unwrap();
            let h1 = impulse_response(5.0, &unit, 2.0, &opts).unwrap();
            let hk = impulse_response(5.0, &scaled, 2.0, &opts).unwrap();
            assert_eq!(hk, k * h1);
        }
    }

    #[test]
    fn response_caps_when_kernel_underflows() {
        let coeffs = ChannelCoefficients::new(2.0, 0.195, 0.3).unwrap();
        let opts = EvaluationOptions::default();
        let h = impulse_response(1e6, &coeffs, 2.0, &opts).unwrap();
        assert_eq!(h, opts.response_cap);
    }

    #[test]
    fn response_never_exceeds_cap() {
        // Walls close to onset push the power law over the cap even when the
        // kernel itself has not underflowed yet.
        let coeffs = ChannelCoefficients::new(2.88107, 0.1950, 0.35527).unwrap();
        let opts = EvaluationOptions::default();
        let mut capped = 0;
        let mut t = opts.t_min;
        while t <= 60.0 {
            let h = impulse_response(t, &coeffs, 3.5, &opts).unwrap();
            assert!(h <= opts.response_cap);
            if h == opts.response_cap {
                capped += 1;
            }
            t += 0.1;
        }
        assert!(capped > 0, "expected some capped samples near onset");
    }

    #[test]
    fn response_rejects_times_before_t_min() {
        let coeffs = ChannelCoefficients::new(1.0, 0.2, 0.3).unwrap();
        let opts = EvaluationOptions::default();
        assert!(matches!(
            impulse_response(0.05, &coeffs, 2.0, &opts),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn amplitude_surface_reproduces_reference_arithmetic() {
        let s = REFERENCE_SURFACES;
        let at = |d, ms, v| s.amplitude_at(&SystemConfig::new(d, ms, v).unwrap());
        assert!(close(at(2.0, 150.0, 1.3), 2.95581, TOL));
        assert!(close(at(2.5, 130.0, 1.5), 2.19295, TOL));
        assert!(close(at(3.5, 170.0, 1.1), 2.88107, TOL));
    }

    #[test]
    fn velocity_surface_reproduces_reference_arithmetic() {
        let s = REFERENCE_SURFACES;
        let at = |d, ms, v| s.velocity_at(&SystemConfig::new(d, ms, v).unwrap());
        assert!(close(at(2.0, 150.0, 1.3), 0.27616, TOL));
        assert!(close(at(2.5, 130.0, 1.5), 0.33885, TOL));
        assert!(close(at(3.5, 170.0, 1.1), 0.35527, TOL));
    }

    #[test]
    fn sigma_surface_reports_value_and_clamp() {
        let s = REFERENCE_SURFACES;
        let ok = s.sigma_at(&SystemConfig::new(2.0, 150.0, 1.3).unwrap());
        assert!(close(ok.value, 0.61981, TOL));
        assert!(!ok.clamped);

        // The linear surface extrapolates to -0.04177 at this corner of the
        // calibrated box; the clamp keeps the std deviation positive.
        let corner = s.sigma_at(&SystemConfig::new(5.0, 50.0, 1.9).unwrap());
        assert_eq!(corner.value, SIGMA_EPSILON);
        assert!(corner.clamped);
        let raw = s.sigma.eval(&SystemConfig::new(5.0, 50.0, 1.9).unwrap());
        assert!(close(raw, -0.04177, TOL));
    }

    #[test]
    fn zero_surfaces_evaluate_to_zero_and_clamp_sigma() {
        let zero = CoefficientSurfaces {
            amplitude: SurfaceBetas {
                beta_d: 0.0,
                beta_s: 0.0,
                beta_v: 0.0,
                beta_0: 0.0,
            },
            velocity: VelocityBetas {
                beta_d: 0.0,
                beta_v: 0.0,
                beta_0: 0.0,
            },
            sigma: SurfaceBetas {
                beta_d: 0.0,
                beta_s: 0.0,
                beta_v: 0.0,
                beta_0: 0.0,
            },
            b_star: 0.195,
        };
        let config = SystemConfig::new(3.0, 100.0, 1.5).unwrap();
        assert_eq!(zero.amplitude_at(&config), 0.0);
        assert_eq!(zero.velocity_at(&config), 0.0);
        let sig = zero.sigma_at(&config);
        assert_eq!(sig.value, SIGMA_EPSILON);
        assert!(sig.clamped);
    }

    #[test]
    fn universal_response_matches_composition() {
        let s = REFERENCE_SURFACES;
        let opts = EvaluationOptions::default();
        let config = SystemConfig::new(2.0, 150.0, 1.3).unwrap();
        let u = universal_response(10.0, &config, &s, &opts).unwrap();
        assert!(close(u, 24.97489218826349, TOL));
        let composed = impulse_response(10.0, &s.coefficients_at(&config), 2.0, &opts).unwrap();
        assert_eq!(u, composed);
    }

    #[test]
    fn universal_response_finite_at_held_out_config() {
        let s = REFERENCE_SURFACES;
        let opts = EvaluationOptions::default();
        let config = SystemConfig::new(2.5, 130.0, 1.5).unwrap();
        let u = universal_response(10.0, &config, &s, &opts).unwrap();
        assert!(u.is_finite() && u > 0.0);
        assert!(close(u, 16.309576510454878, 1e-6));
    }

    #[test]
    fn legacy_response_examples() {
        // Drift-arrival time: exponent vanishes, leaving a/t^1.5.
        let v = legacy_response(4.0, 3.0, 0.5, 1.0, 4.0).unwrap();
        assert_eq!(v, 3.0 / 8.0);
        // Unit substitution: e^-1.
        let e = legacy_response(1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert!(close(e, (-1.0f64).exp(), TOL));
        // Independently evaluated closed form.
        let w = legacy_response(2.0, 3.0, 0.5, 1.0, 4.0).unwrap();
        assert!(close(w, 0.3901950712671667, TOL));
        assert!(matches!(
            legacy_response(0.0, 3.0, 0.5, 1.0, 4.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn concentration_is_linear_in_molecule_count() {
        let base = ConcentrationParams::new(1.0, 0.195, 0.27616, 2.0).unwrap();
        let five = ConcentrationParams::new(5.0, 0.195, 0.27616, 2.0).unwrap();
        let c1 = concentration(10.0, &base).unwrap();
        let c5 = concentration(10.0, &five).unwrap();
        assert_eq!(c5, 5.0 * c1);
        assert!(close(c5, 0.18753491925201869, TOL));
        // M = 1 reduces to the kernel itself.
        assert_eq!(c1, concentration_kernel(10.0, 2.0, 0.195, 0.27616).unwrap());
    }

    #[test]
    fn resistance_power_law_examples() {
        let params = SensorParams::new(7.0, -0.65, 1.0).unwrap();
        assert_eq!(resistance_from_concentration(1.0, &params).unwrap(), 7.0);

        // Doubling the concentration multiplies resistance by 2^n.
        let unit = SensorParams::default();
        for k in [0.1, 1.0, 42.0] {
            let r1 = resistance_from_concentration(k, &unit).unwrap();
            let r2 = resistance_from_concentration(2.0 * k, &unit).unwrap();
            assert!(close(r2 / r1, 0.6372803136596311, 1e-12));
        }

        assert!(matches!(
            resistance_from_concentration(0.0, &unit),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn default_sensor_exponent_is_wired() {
        assert_eq!(SensorParams::default().exponent, -0.65);
        assert_eq!(SENSOR_EXPONENT, -0.65);
    }

    #[test]
    fn power_law_slope_examples() {
        // One decade down per decade across.
        let slope = estimate_power_law_exponent(&[(100.0, 10.0), (1000.0, 1.0)]).unwrap();
        assert!(close(slope, -1.0, 1e-12));

        // Exact recovery from noiseless power-law points.
        let points: Vec<(f64, f64)> = [50.0, 100.0, 500.0, 1000.0]
            .iter()
            .map(|&c: &f64| (c, 3.0 * c.powf(-0.65)))
            .collect();
        let n = estimate_power_law_exponent(&points).unwrap();
        assert!(close(n, -0.65, 1e-12), "slope = {n}");

        // Horizontal line.
        let flat =
            estimate_power_law_exponent(&[(10.0, 5.0), (100.0, 5.0), (1000.0, 5.0)]).unwrap();
        assert_eq!(flat, 0.0);

        // Degenerate inputs.
        assert!(matches!(
            estimate_power_law_exponent(&[(100.0, 10.0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            estimate_power_law_exponent(&[(100.0, 10.0), (100.0, 20.0)]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            estimate_power_law_exponent(&[(100.0, 10.0), (-1.0, 20.0)]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn peak_time_matches_oracle_values() {
        let t = peak_time(0.195, 0.27616, 2.0).unwrap();
        assert!(close(t, 2.878653358705063, TOL), "peak drifted: {t}");
        // Zero drift: pure-diffusion limit d^2/(6b).
        let t0 = peak_time(0.195, 0.0, 2.0).unwrap();
        assert!(close(t0, 3.4188034188034188, TOL));
        assert!(close(t0, 4.0 / (6.0 * 0.195), TOL));
    }

    #[test]
    fn peak_time_is_a_local_maximum_of_the_kernel() {
        let (b, c, d) = (0.195, 0.27616, 2.0);
        let t = peak_time(b, c, d).unwrap();
        let k = concentration_kernel(t, d, b, c).unwrap();
        for dt in [-1e-3, 1e-3] {
            let k_side = concentration_kernel(t + dt, d, b, c).unwrap();
            assert!(k_side < k, "kernel should fall off at t* {dt:+}");
        }
    }

    #[test]
    fn peak_time_rejects_bad_arguments() {
        assert!(matches!(peak_time(0.0, 0.3, 2.0), Err(Error::Domain(_))));
        assert!(matches!(peak_time(0.2, 0.3, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn hull_check_matches_calibrated_box() {
        assert!(SystemConfig::new(2.0, 50.0, 1.0)
            .unwrap()
            .in_calibrated_hull());
        assert!(SystemConfig::new(5.0, 200.0, 1.9)
            .unwrap()
            .in_calibrated_hull());
        assert!(SystemConfig::new(3.5, 170.0, 1.1)
            .unwrap()
            .in_calibrated_hull());
        assert!(!SystemConfig::new(1.9, 50.0, 1.0)
            .unwrap()
            .in_calibrated_hull());
        assert!(!SystemConfig::new(2.0, 250.0, 1.0)
            .unwrap()
            .in_calibrated_hull());
        assert!(!SystemConfig::new(2.0, 50.0, 2.0)
            .unwrap()
            .in_calibrated_hull());
    }

    #[test]
    fn config_rejects_non_positive_knobs() {
        assert!(SystemConfig::new(0.0, 50.0, 1.0).is_err());
        assert!(SystemConfig::new(2.0, -1.0, 1.0).is_err());
        assert!(SystemConfig::new(2.0, 50.0, f64::NAN).is_err());
    }

    #[test]
    fn reference_surfaces_validate() {
        REFERENCE_SURFACES.validate().unwrap();
        assert_eq!(REFERENCE_SURFACES.b_star, 0.1950);
    }
}
