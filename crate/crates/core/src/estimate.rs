//! Trace fitting and the calibration pipeline.
//!
//! Fitting recovers the per-trace coefficients `(a, b, c)` of the response
//! `h(t) = a · kernel(t; d, b, c)^(−0.65)` from observed `(time, value)`
//! samples by damped Gauss–Newton (Levenberg–Marquardt style) least squares.
//! Positivity of `a` and `b` is structural: the solver works on
//! `q = (ln a, ln b, c)`, so no bound projection is ever needed.
//!
//! Calibration turns a whole dataset of traces into [`CoefficientSurfaces`]
//! in five ordered stages:
//!
//! 1. free fit of every trace;
//! 2. `b_star` = arithmetic mean of stage-1 diffusion estimates;
//! 3. refit of every trace with the diffusion fixed at `b_star`;
//! 4. per-config aggregation into a [`CoefficientTable`]
//!    (sample mean and n−1 standard deviation of `a` and `c`);
//! 5. ordinary least squares of the three coefficient surfaces over the
//!    configs: amplitude and noise-σ on `[d, s, ν, 1]`, velocity on
//!    `[d, ν, 1]`.
//!
//! Every step is deterministic — fits are pure functions of their trace,
//! stage-2 sums in dataset order, and the OLS solves are sequential — so a
//! calibration is bit-reproducible for a given dataset.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure_positive, Error, Result};
use crate::model::{
    response_unchecked, ChannelCoefficients, CoefficientSurfaces, EvaluationOptions, SurfaceBetas,
    SystemConfig, VelocityBetas,
};

// ====================================================================
// Domain types
// ====================================================================

/// One recorded transmission: the time series of sensor readings for a single
/// spray at a single system config.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// Sample times in seconds, strictly increasing, all ≥ 0.
    pub times: Vec<f64>,
    /// Sensor readings in observation units, finite (negative allowed — raw
    /// readings may sit below an arbitrary baseline).
    pub values: Vec<f64>,
    /// The system config this trace was recorded at.
    pub config: SystemConfig,
    /// Trial number within the config's repetition set.
    pub trial_id: u32,
}

impl Trace {
    /// Builds a trace, enforcing equal lengths, strictly increasing finite
    /// non-negative times, and finite values. An empty trace is valid (it
    /// just cannot be fitted).
    pub fn new(
        times: Vec<f64>,
        values: Vec<f64>,
        config: SystemConfig,
        trial_id: u32,
    ) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::input(format!(
                "times and values differ in length: {} vs {}",
                times.len(),
                values.len()
            )));
        }
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::input(format!(
                    "time at sample {i} must be finite and ≥ 0, got {t}"
                )));
            }
            if i > 0 && t <= times[i - 1] {
                return Err(Error::input(format!(
                    "times must be strictly increasing, but sample {i} has {t} after {}",
                    times[i - 1]
                )));
            }
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::input(format!(
                    "value at sample {i} must be finite, got {v}"
                )));
            }
        }
        Ok(Trace {
            times,
            values,
            config,
            trial_id,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// True when the trace holds no samples.
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Knobs of the nonlinear least-squares solver.
///
/// There is deliberately no bounds field: the solver iterates on
/// `(ln a, ln b, c)`, making `a > 0` and `b > 0` structural.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Starting coefficients. When absent, a heuristic guess is derived from
    /// the trace's extremum sample and a basin-search stage runs first.
    pub initial_guess: Option<ChannelCoefficients>,
    /// Iteration budget of the main solve.
    pub max_iterations: usize,
    /// Convergence threshold on the relative SSE improvement per accepted
    /// step.
    pub relative_sse_tolerance: f64,
    /// Initial Levenberg–Marquardt damping factor λ.
    pub damping_init: f64,
    /// Earliest sample time admitted to the fit, in seconds; `None` uses the
    /// model's own `eval.t_min`. Samples before it are excluded because the
    /// response family is undefined near spray onset.
    pub fit_window_start: Option<f64>,
    /// Guards used when evaluating the model during the fit.
    pub eval: EvaluationOptions,
}

impl FitOptions {
    /// Checks option consistency.
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::input("max_iterations must be at least 1"));
        }
        if !self.relative_sse_tolerance.is_finite() || self.relative_sse_tolerance <= 0.0 {
            return Err(Error::input(format!(
                "relative_sse_tolerance must be a positive finite number, got {}",
                self.relative_sse_tolerance
            )));
        }
        if !self.damping_init.is_finite() || self.damping_init <= 0.0 {
            return Err(Error::input(format!(
                "damping_init must be a positive finite number, got {}",
                self.damping_init
            )));
        }
        if let Some(w) = self.fit_window_start {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::input(format!(
                    "fit_window_start must be finite and ≥ 0, got {w}"
                )));
            }
        }
        if let Some(g) = &self.initial_guess {
            ensure_positive("initial_guess amplitude", g.amplitude)?;
            ensure_positive("initial_guess diffusion", g.diffusion)?;
            if !g.velocity.is_finite() {
                return Err(Error::input(format!(
                    "initial_guess velocity must be finite, got {}",
                    g.velocity
                )));
            }
        }
        self.eval.validate()
    }

    /// The effective fit-window start: explicit value or the model's `t_min`.
    pub fn window_start(&self) -> f64 {
        self.fit_window_start.unwrap_or(self.eval.t_min)
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            initial_guess: None,
            max_iterations: 200,
            relative_sse_tolerance: 1e-8,
            damping_init: 1e-3,
            fit_window_start: None,
            eval: EvaluationOptions::default(),
        }
    }
}

/// Outcome of a single trace fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    /// Best coefficients found.
    pub coefficients: ChannelCoefficients,
    /// Root-mean-square residual over the fitted samples: `√(sse/N)`.
    pub rmse: f64,
    /// Final sum of squared residuals over the fitted samples.
    pub sse: f64,
    /// Iterations spent in the main solve (≤ `max_iterations`).
    pub iterations: usize,
    /// True when the relative SSE improvement dropped below tolerance within
    /// the iteration budget.
    pub converged: bool,
}

/// Per-config aggregate of the fixed-diffusion refits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientRow {
    /// The system config this row aggregates.
    pub config: SystemConfig,
    /// Sample mean of the fitted amplitudes.
    pub mean_a: f64,
    /// Sample standard deviation (n−1 denominator; 0 for a single trial) of
    /// the fitted amplitudes.
    pub std_a: f64,
    /// Sample mean of the fitted velocities.
    pub mean_c: f64,
    /// Sample standard deviation of the fitted velocities.
    pub std_c: f64,
    /// Number of trials aggregated into this row.
    pub trial_count: usize,
}

/// Aggregated coefficients keyed by config, ordered lexicographically by
/// (distance, spray duration, voltage).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoefficientTable {
    rows: BTreeMap<[u64; 3], CoefficientRow>,
}

/// Ordering/lookup key: the config's bit patterns. All config fields are
/// positive finite, where IEEE-754 bit order equals numeric order.
fn config_key(config: &SystemConfig) -> [u64; 3] {
    [
        config.distance_m.to_bits(),
        config.spray_ms.to_bits(),
        config.init_voltage_v.to_bits(),
    ]
}

impl CoefficientTable {
    /// Number of config rows.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// True when the table holds no rows.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row for an exact config, if present.
    pub fn get(&self, config: &SystemConfig) -> Option<&CoefficientRow> {
        self.rows.get(&config_key(config))
    }

    /// Rows in (distance, spray, voltage) lexicographic order.
    pub fn rows(&self) -> impl Iterator<Item = &CoefficientRow> {
        self.rows.values()
    }

    fn insert(&mut self, row: CoefficientRow) {
        self.rows.insert(config_key(&row.config), row);
    }
}

/// Residual RMSE of each surface regression — how far the aggregated
/// coefficients sit from the fitted planes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceResiduals {
    /// Residual RMSE of the amplitude surface over the table rows.
    pub amplitude_rmse: f64,
    /// Residual RMSE of the velocity surface.
    pub velocity_rmse: f64,
    /// Residual RMSE of the noise-σ surface.
    pub sigma_rmse: f64,
}

/// Identity and both fit results for one trace inside a calibration run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFitRecord {
    /// Position of the trace in the calibration dataset.
    pub index: usize,
    /// The trace's system config.
    pub config: SystemConfig,
    /// The trace's trial number.
    pub trial_id: u32,
    /// Stage-1 free fit.
    pub free: FitResult,
    /// Stage-3 refit with the diffusion fixed at `b_star`.
    pub fixed: FitResult,
}

/// Everything a calibration run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// The fitted coefficient surfaces, including `b_star`
    /// (always the mean of the stage-1 diffusion estimates).
    pub surfaces: CoefficientSurfaces,
    /// Per-config aggregates behind the surface regressions.
    pub table: CoefficientTable,
    /// Both fits of every trace, in dataset order.
    pub per_trace_fits: Vec<TraceFitRecord>,
    /// Residual RMSE of each surface regression.
    pub residuals: SurfaceResiduals,
}

// ====================================================================
// Solver internals
// ====================================================================

/// Minimum samples a fit needs, after windowing and saturation censoring.
const MIN_USABLE_SAMPLES: usize = 8;
/// Per-component clamp on solver steps, in `(ln a, ln b, c)` space: one step
/// may scale a coefficient by at most e⁵.
const MAX_STEP: f64 = 5.0;
/// Damping factor above which the solve is declared stuck.
const LAMBDA_CEILING: f64 = 1e14;
/// Damping factor never decays below this.
const LAMBDA_FLOOR: f64 = 1e-12;
/// Floor on the JᵀJ diagonal entering the damping term, so a flat parameter
/// direction cannot produce a singular system.
const DIAG_FLOOR: f64 = 1e-12;
/// Iteration budget of the log-residual basin-search stage.
const BASIN_MAX_ITERATIONS: usize = 100;
/// Convergence tolerance of the basin-search stage.
const BASIN_TOLERANCE: f64 = 1e-10;
/// An SSE at or below this fraction of Σ target² counts as an exact fit: the
/// solve converges immediately (residuals are at round-off level).
const ABSOLUTE_SSE_FLOOR_SCALE: f64 = 1e-26;
/// Denominator guard for relative-improvement ratios (smallest positive f64).
const SSE_DENOM_FLOOR: f64 = 5e-324;
/// Diffusion value of the heuristic initial guess.
const GUESS_DIFFUSION: f64 = 0.2;

/// Decodes the solver's parameter vector into `(a, b, c)`.
fn decode(q: &DVector<f64>, fixed_b: Option<f64>) -> (f64, f64, f64) {
    match fixed_b {
        Some(b) => (q[0].exp(), b, q[1]),
        None => (q[0].exp(), q[1].exp(), q[2]),
    }
}

/// One least-squares problem: fixed samples, fixed distance, optional fixed
/// diffusion, linear- or log-space residuals.
struct CoreProblem<'a> {
    times: &'a [f64],
    /// Per-sample regression target: the observations themselves, or their
    /// logs when `log_space` is set.
    target: &'a [f64],
    distance_m: f64,
    fixed_b: Option<f64>,
    log_space: bool,
    eval: &'a EvaluationOptions,
}

struct CoreOutcome {
    sse: f64,
    iterations: usize,
    converged: bool,
}

impl CoreProblem<'_> {
    /// Writes `target − model(q)` (or `target − ln model(q)`) into `out`.
    fn residuals_into(&self, q: &DVector<f64>, out: &mut DVector<f64>) {
        let (a, b, c) = decode(q, self.fixed_b);
        for (i, (&t, &y)) in self.times.iter().zip(self.target).enumerate() {
            let m = response_unchecked(t, a, b, c, self.distance_m, self.eval);
            out[i] = if self.log_space { y - m.ln() } else { y - m };
        }
    }
}

/// Damped Gauss–Newton loop with a Marquardt diagonal damping term and an
/// inner λ-retry cycle per iteration.
///
/// Acceptance requires a strictly smaller finite SSE (a tie keeps the earlier
/// iterate, for determinism). Convergence is declared when the relative SSE
/// improvement of an accepted step falls below `relative_tolerance`, when a
/// finite rejected trial shows no room to move (|relative change| below
/// tolerance), or when the SSE reaches the round-off floor. A λ that climbs
/// past [`LAMBDA_CEILING`] without any acceptable step ends the solve
/// unconverged.
fn minimize(
    problem: &CoreProblem<'_>,
    q: &mut DVector<f64>,
    max_iterations: usize,
    relative_tolerance: f64,
    damping_init: f64,
) -> Result<CoreOutcome> {
    let n = problem.times.len();
    let p = q.len();
    let mut r = DVector::zeros(n);
    problem.residuals_into(q, &mut r);
    let mut sse = r.norm_squared();
    if !sse.is_finite() {
        let (a, b, c) = decode(q, problem.fixed_b);
        return Err(Error::Numerical {
            message: "residual sum of squares is not finite at the starting point".to_string(),
            last_coefficients: Some(ChannelCoefficients {
                amplitude: a,
                diffusion: b,
                velocity: c,
            }),
        });
    }
    let floor_sse = ABSOLUTE_SSE_FLOOR_SCALE * problem.target.iter().map(|y| y * y).sum::<f64>();

    let mut lambda = damping_init;
    let mut converged = false;
    let mut iterations = 0;
    let mut r_trial = DVector::zeros(n);

    for it in 1..=max_iterations {
        iterations = it;
        if sse <= floor_sse {
            converged = true;
            break;
        }

        // Forward-difference Jacobian of the model w.r.t. q at the current
        // iterate (r holds the residuals at q).
        let mut jac = DMatrix::zeros(n, p);
        for i in 0..p {
            let step = 1e-6f64.max(1e-6 * q[i].abs());
            let mut q_probe = q.clone();
            q_probe[i] += step;
            problem.residuals_into(&q_probe, &mut r_trial);
            for k in 0..n {
                jac[(k, i)] = (r_trial[k] - r[k]) / (-step);
            }
        }
        let jtj = jac.tr_mul(&jac);
        let grad = jac.tr_mul(&r);
        let mut diag = DVector::zeros(p);
        for i in 0..p {
            diag[i] = jtj[(i, i)].max(DIAG_FLOOR);
        }

        let mut accepted = false;
        loop {
            let mut damped = jtj.clone();
            for i in 0..p {
                damped[(i, i)] += lambda * diag[i];
            }
            let delta = damped
                .lu()
                .solve(&grad)
                .filter(|d| d.iter().all(|x| x.is_finite()));
            if let Some(mut delta) = delta {
                for i in 0..p {
                    delta[i] = delta[i].clamp(-MAX_STEP, MAX_STEP);
                }
                let q_trial = &*q + &delta;
                problem.residuals_into(&q_trial, &mut r_trial);
                let sse_trial = r_trial.norm_squared();
                if sse_trial.is_finite() && sse_trial < sse {
                    let rel = (sse - sse_trial) / sse.max(SSE_DENOM_FLOOR);
                    *q = q_trial;
                    sse = sse_trial;
                    std::mem::swap(&mut r, &mut r_trial);
                    lambda = (lambda / 10.0).max(LAMBDA_FLOOR);
                    accepted = true;
                    if rel < relative_tolerance {
                        converged = true;
                    }
                    break;
                }
                if sse_trial.is_finite() {
                    let rel = (sse - sse_trial) / sse.max(SSE_DENOM_FLOOR);
                    if rel.abs() < relative_tolerance {
                        converged = true;
                        break;
                    }
                }
            }
            lambda *= 10.0;
            if lambda > LAMBDA_CEILING {
                break;
            }
        }
        if converged || (!accepted && lambda > LAMBDA_CEILING) {
            break;
        }
    }
    Ok(CoreOutcome {
        sse,
        iterations,
        converged,
    })
}

/// Shared implementation of the free and fixed-diffusion fits.
fn fit_impl(trace: &Trace, fixed_b: Option<f64>, options: &FitOptions) -> Result<FitResult> {
    options.validate()?;
    let d = trace.config.distance_m;
    let window = options.window_start();

    // Usable samples: inside the fit window and below the response cap.
    // Capped readings are saturated — they carry no shape information, and
    // keeping them would let the plateau dominate the least squares. (t > 0
    // additionally guards the model itself when the window is set to 0.)
    let mut t_usable = Vec::with_capacity(trace.len());
    let mut o_usable = Vec::with_capacity(trace.len());
    for (&t, &v) in trace.times.iter().zip(&trace.values) {
        if t >= window && t > 0.0 && v < options.eval.response_cap {
            t_usable.push(t);
            o_usable.push(v);
        }
    }
    if t_usable.len() < MIN_USABLE_SAMPLES {
        return Err(Error::input(format!(
            "trace has {} usable samples (time ≥ {window} s, value below the response cap {}); \
             fitting needs at least {MIN_USABLE_SAMPLES}",
            t_usable.len(),
            options.eval.response_cap
        )));
    }

    // Starting point. An explicit guess is taken as-is; otherwise the
    // extremum sample seeds the heuristic — the response dips where the puff
    // concentration peaks (negative sensor exponent), which for drift-
    // dominated traces happens near t ≈ d/c — and a log-residual basin search
    // refines it before the true least-squares polish.
    let (mut q, run_basin) = match &options.initial_guess {
        Some(g) => {
            let q = match fixed_b {
                Some(_) => DVector::from_vec(vec![g.amplitude.ln(), g.velocity]),
                None => DVector::from_vec(vec![g.amplitude.ln(), g.diffusion.ln(), g.velocity]),
            };
            (q, false)
        }
        None => {
            let mut i_min = 0;
            for (i, &v) in o_usable.iter().enumerate() {
                if v < o_usable[i_min] {
                    i_min = i;
                }
            }
            let t_ext = t_usable[i_min];
            let o_ext = o_usable[i_min];
            let c0 = d / t_ext;
            let b0 = GUESS_DIFFUSION;
            // Kernel prefactor at the extremum, Gaussian factor taken as 1.
            let k0 = d / (4.0 * std::f64::consts::PI * b0 * t_ext * t_ext * t_ext).sqrt();
            let a0 = if o_ext > 0.0 {
                (o_ext * k0.powf(0.65)).max(1e-12)
            } else {
                1e-3
            };
            let q = match fixed_b {
                Some(_) => DVector::from_vec(vec![a0.ln(), c0]),
                None => DVector::from_vec(vec![a0.ln(), b0.ln(), c0]),
            };
            (q, true)
        }
    };

    // Basin stage: damped Gauss–Newton on ln(obs) − ln(model) over the
    // positive observations. Log residuals flatten the huge dynamic range
    // near the response walls, which reliably carries the heuristic guess
    // into the right basin; the subsequent polish then answers the actual
    // least-squares question. Skipped with an explicit guess, with too few
    // positive samples, or if its starting point is degenerate.
    if run_basin {
        let mut t_pos = Vec::with_capacity(t_usable.len());
        let mut ln_obs = Vec::with_capacity(t_usable.len());
        for (&t, &o) in t_usable.iter().zip(&o_usable) {
            if o > 0.0 {
                t_pos.push(t);
                ln_obs.push(o.ln());
            }
        }
        if t_pos.len() >= MIN_USABLE_SAMPLES {
            let problem = CoreProblem {
                times: &t_pos,
                target: &ln_obs,
                distance_m: d,
                fixed_b,
                log_space: true,
                eval: &options.eval,
            };
            let mut q_basin = q.clone();
            if minimize(
                &problem,
                &mut q_basin,
                BASIN_MAX_ITERATIONS,
                BASIN_TOLERANCE,
                options.damping_init,
            )
            .is_ok()
            {
                q = q_basin;
            }
        }
    }

    // Polish stage: the true sum-of-squares minimization the result reports.
    let problem = CoreProblem {
        times: &t_usable,
        target: &o_usable,
        distance_m: d,
        fixed_b,
        log_space: false,
        eval: &options.eval,
    };
    let outcome = minimize(
        &problem,
        &mut q,
        options.max_iterations,
        options.relative_sse_tolerance,
        options.damping_init,
    )?;

    let (a, b, c) = decode(&q, fixed_b);
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::Numerical {
            message: "fit diverged to non-finite coefficients".to_string(),
            last_coefficients: Some(ChannelCoefficients {
                amplitude: a,
                diffusion: b,
                velocity: c,
            }),
        });
    }
    Ok(FitResult {
        coefficients: ChannelCoefficients {
            amplitude: a,
            diffusion: b,
            velocity: c,
        },
        rmse: (outcome.sse / t_usable.len() as f64).sqrt(),
        sse: outcome.sse,
        iterations: outcome.iterations,
        converged: outcome.converged,
    })
}

// ====================================================================
// Fitting operations
// ====================================================================

/// Fits all three coefficients `(a, b, c)` of the response to a trace by
/// damped Gauss–Newton least squares with a forward finite-difference
/// Jacobian.
///
/// `converged` is true iff the relative SSE improvement dropped below
/// `options.relative_sse_tolerance` within the iteration budget.
///
/// # Errors
/// Input error when fewer than 8 usable samples remain after windowing and
/// saturation censoring; numerical error (with the last iterate attached)
/// when the SSE is not finite.
pub fn fit_channel(trace: &Trace, options: &FitOptions) -> Result<FitResult> {
    fit_impl(trace, None, options)
}

/// Fits only `(a, c)` with the diffusion pinned at `b_star`; the result's
/// diffusion equals `b_star` exactly.
///
/// # Errors
/// As [`fit_channel`]; additionally requires `b_star > 0`.
pub fn fit_channel_fixed_b(trace: &Trace, b_star: f64, options: &FitOptions) -> Result<FitResult> {
    ensure_positive("b_star", b_star)?;
    fit_impl(trace, Some(b_star), options)
}

/// Root-mean-square error between a trace's values and a predicted sequence:
/// `√(Σ(observed − predicted)²/N)` over all samples.
///
/// # Errors
/// Input error on length mismatch or an empty trace.
pub fn rmse(trace: &Trace, predicted: &[f64]) -> Result<f64> {
    if trace.len() != predicted.len() {
        return Err(Error::input(format!(
            "predicted sequence length {} does not match trace length {}",
            predicted.len(),
            trace.len()
        )));
    }
    if trace.is_empty() {
        return Err(Error::input("cannot compute the RMSE of an empty trace"));
    }
    let sse: f64 = trace
        .values
        .iter()
        .zip(predicted)
        .map(|(o, p)| (o - p) * (o - p))
        .sum();
    Ok((sse / trace.len() as f64).sqrt())
}

// ====================================================================
// Aggregation and surface regression
// ====================================================================

/// Arithmetic mean of the diffusion estimates, summed in the order given
/// (dataset order, for bit-reproducibility).
///
/// # Errors
/// Input error on an empty sequence.
pub fn compute_b_star(fits: &[FitResult]) -> Result<f64> {
    if fits.is_empty() {
        return Err(Error::input(
            "cannot average the diffusion coefficient of zero fits",
        ));
    }
    let sum: f64 = fits.iter().map(|f| f.coefficients.diffusion).sum();
    Ok(sum / fits.len() as f64)
}

/// Groups fit results by config and reduces each group to the sample mean and
/// sample standard deviation (n−1 denominator; 0 for a single trial) of the
/// amplitude and velocity.
///
/// # Errors
/// Input error on an empty sequence.
pub fn aggregate_coefficients(fits: &[(SystemConfig, FitResult)]) -> Result<CoefficientTable> {
    if fits.is_empty() {
        return Err(Error::input("cannot aggregate zero fits"));
    }
    // Per config: the (amplitude, velocity) pair of every trial, keyed by the
    // config's bit pattern so grouping is exact.
    type Group = (SystemConfig, Vec<(f64, f64)>);
    let mut groups: BTreeMap<[u64; 3], Group> = BTreeMap::new();
    for (config, fit) in fits {
        groups
            .entry(config_key(config))
            .or_insert_with(|| (*config, Vec::new()))
            .1
            .push((fit.coefficients.amplitude, fit.coefficients.velocity));
    }

    // Two-pass mean/std per group, in the group's insertion order.
    fn mean_std(samples: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
        let mean = samples.clone().sum::<f64>() / n as f64;
        if n < 2 {
            return (mean, 0.0);
        }
        let ss: f64 = samples.map(|x| (x - mean) * (x - mean)).sum();
        (mean, (ss / (n - 1) as f64).sqrt())
    }

    let mut table = CoefficientTable::default();
    for (config, pairs) in groups.values() {
        let n = pairs.len();
        let (mean_a, std_a) = mean_std(pairs.iter().map(|&(a, _)| a), n);
        let (mean_c, std_c) = mean_std(pairs.iter().map(|&(_, c)| c), n);
        table.insert(CoefficientRow {
            config: *config,
            mean_a,
            std_a,
            mean_c,
            std_c,
            trial_count: n,
        });
    }
    Ok(table)
}

/// Ordinary least squares of the three coefficient surfaces over the table's
/// configs: amplitude (targets `mean_a`) and noise-σ (targets `std_a`) on the
/// design `[d, s, ν, 1]`, velocity (targets `mean_c`) on `[d, ν, 1]`.
///
/// `b_star` is not estimated here — it comes from the diffusion averaging
/// stage — and is only carried into the returned surfaces.
///
/// Returns the surfaces together with each regression's residual RMSE.
///
/// # Errors
/// Input error with fewer than 4 rows or fewer than 3 distinct
/// (distance, voltage) pairs; rank-deficiency error naming the surface whose
/// design matrix is singular.
pub fn fit_linear_surfaces(
    table: &CoefficientTable,
    b_star: f64,
) -> Result<(CoefficientSurfaces, SurfaceResiduals)> {
    ensure_positive("b_star", b_star)?;
    let n = table.len();
    if n < 4 {
        return Err(Error::input(format!(
            "surface regression needs at least 4 distinct configs, got {n}"
        )));
    }
    let distinct_dv: BTreeSet<[u64; 2]> = table
        .rows()
        .map(|r| {
            [
                r.config.distance_m.to_bits(),
                r.config.init_voltage_v.to_bits(),
            ]
        })
        .collect();
    if distinct_dv.len() < 3 {
        return Err(Error::input(format!(
            "velocity surface regression needs at least 3 distinct (distance, voltage) pairs, got {}",
            distinct_dv.len()
        )));
    }

    let mut x_full = DMatrix::zeros(n, 4);
    let mut x_dv = DMatrix::zeros(n, 3);
    let mut y_mean_a = DVector::zeros(n);
    let mut y_std_a = DVector::zeros(n);
    let mut y_mean_c = DVector::zeros(n);
    for (i, row) in table.rows().enumerate() {
        let (d, s, v) = (
            row.config.distance_m,
            row.config.spray_ms,
            row.config.init_voltage_v,
        );
        x_full[(i, 0)] = d;
        x_full[(i, 1)] = s;
        x_full[(i, 2)] = v;
        x_full[(i, 3)] = 1.0;
        x_dv[(i, 0)] = d;
        x_dv[(i, 1)] = v;
        x_dv[(i, 2)] = 1.0;
        y_mean_a[i] = row.mean_a;
        y_std_a[i] = row.std_a;
        y_mean_c[i] = row.mean_c;
    }

    // Minimum-norm least squares through SVD; with full column rank (checked
    // against a relative singular-value threshold) this is the unique OLS
    // solution.
    fn ols(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        surface: &'static str,
    ) -> Result<(DVector<f64>, f64)> {
        let svd = x.clone().svd(true, true);
        let max_sv = svd.singular_values.max();
        let eps = 1e-10 * max_sv;
        let rank = svd.rank(eps);
        if max_sv == 0.0 || rank < x.ncols() {
            return Err(Error::RankDeficient {
                surface,
                detail: format!(
                    "design matrix has rank {rank} < {} (largest singular value {max_sv}); \
                     the configs do not span the surface's regressors",
                    x.ncols()
                ),
            });
        }
        let beta = svd
            .solve(y, eps)
            .map_err(|e| Error::input(format!("{surface} surface solve failed: {e}")))?;
        let residual = x * &beta - y;
        let rmse = (residual.norm_squared() / x.nrows() as f64).sqrt();
        Ok((beta, rmse))
    }

    // Amplitude and noise-σ share the [d, s, ν, 1] design; a deficiency there
    // is reported once, against the amplitude surface.
    let (beta_a, amplitude_rmse) = ols(&x_full, &y_mean_a, "amplitude")?;
    let (beta_l, sigma_rmse) = ols(&x_full, &y_std_a, "sigma")?;
    let (beta_c, velocity_rmse) = ols(&x_dv, &y_mean_c, "velocity")?;

    let surfaces = CoefficientSurfaces {
        amplitude: SurfaceBetas {
            beta_d: beta_a[0],
            beta_s: beta_a[1],
            beta_v: beta_a[2],
            beta_0: beta_a[3],
        },
        velocity: VelocityBetas {
            beta_d: beta_c[0],
            beta_v: beta_c[1],
            beta_0: beta_c[2],
        },
        sigma: SurfaceBetas {
            beta_d: beta_l[0],
            beta_s: beta_l[1],
            beta_v: beta_l[2],
            beta_0: beta_l[3],
        },
        b_star,
    };
    Ok((
        surfaces,
        SurfaceResiduals {
            amplitude_rmse,
            velocity_rmse,
            sigma_rmse,
        },
    ))
}

// ====================================================================
// The calibration pipeline
// ====================================================================

/// Human-readable identity of a trace inside a dataset, used in stage errors.
fn trace_label(index: usize, trace: &Trace) -> String {
    format!(
        "trace {index} (d={} m, s={} ms, v={} V, trial {})",
        trace.config.distance_m, trace.config.spray_ms, trace.config.init_voltage_v, trace.trial_id
    )
}

fn stage_error(stage: &'static str, trace: String, source: Error) -> Error {
    Error::CalibrationStage {
        stage,
        trace,
        source: Box::new(source),
    }
}

/// Runs the five-stage calibration over a dataset of traces:
///
/// 1. `free-fit` — [`fit_channel`] on every trace;
/// 2. `b-star` — [`compute_b_star`] over the stage-1 fits, in dataset order;
/// 3. `fixed-b-refit` — [`fit_channel_fixed_b`] of every trace at `b_star`;
/// 4. `aggregate` — [`aggregate_coefficients`] of the stage-3 fits;
/// 5. `surface-regression` — [`fit_linear_surfaces`] of the table.
///
/// Stages run strictly in order; any failure aborts the run with the stage
/// name and the offending trace's identity. The returned surfaces' `b_star`
/// is exactly the stage-2 mean.
///
/// # Errors
/// Input error on an empty dataset; otherwise a calibration-stage error
/// wrapping the underlying failure.
pub fn calibrate(dataset: &[Trace], options: &FitOptions) -> Result<CalibrationResult> {
    if dataset.is_empty() {
        return Err(Error::input("cannot calibrate from an empty dataset"));
    }

    // Stage 1: free fits.
    let mut free_fits = Vec::with_capacity(dataset.len());
    for (i, trace) in dataset.iter().enumerate() {
        let fit = fit_channel(trace, options)
            .map_err(|e| stage_error("free-fit", trace_label(i, trace), e))?;
        log::debug!(
            "free fit of {}: a={} b={} c={} rmse={} iterations={}",
            trace_label(i, trace),
            fit.coefficients.amplitude,
            fit.coefficients.diffusion,
            fit.coefficients.velocity,
            fit.rmse,
            fit.iterations
        );
        free_fits.push(fit);
    }

    // Stage 2: shared diffusion coefficient.
    let b_star = compute_b_star(&free_fits)
        .map_err(|e| stage_error("b-star", "(dataset)".to_string(), e))?;
    log::info!(
        "calibration b_star = {b_star} over {} traces",
        dataset.len()
    );

    // Stage 3: refits with the diffusion pinned.
    let mut fixed_fits = Vec::with_capacity(dataset.len());
    for (i, trace) in dataset.iter().enumerate() {
        let fit = fit_channel_fixed_b(trace, b_star, options)
            .map_err(|e| stage_error("fixed-b-refit", trace_label(i, trace), e))?;
        fixed_fits.push(fit);
    }

    // Stage 4: per-config aggregation of the pinned refits.
    let keyed: Vec<(SystemConfig, FitResult)> = dataset
        .iter()
        .zip(&fixed_fits)
        .map(|(trace, fit)| (trace.config, *fit))
        .collect();
    let table = aggregate_coefficients(&keyed)
        .map_err(|e| stage_error("aggregate", "(dataset)".to_string(), e))?;

    // Stage 5: coefficient surfaces.
    let (surfaces, residuals) = fit_linear_surfaces(&table, b_star)
        .map_err(|e| stage_error("surface-regression", "(dataset)".to_string(), e))?;

    let per_trace_fits = dataset
        .iter()
        .enumerate()
        .zip(free_fits.into_iter().zip(fixed_fits))
        .map(|((index, trace), (free, fixed))| TraceFitRecord {
            index,
            config: trace.config,
            trial_id: trace.trial_id,
            free,
            fixed,
        })
        .collect();

    Ok(CalibrationResult {
        surfaces,
        table,
        per_trace_fits,
        residuals,
    })
}

/// Response values predicted by the surfaces at a config, one per requested
/// time, using the default evaluation guards.
///
/// Logs a warning (but still evaluates) when the config lies outside the
/// calibrated box — the linear surfaces extrapolate there.
///
/// # Errors
/// Input error when any time is below the model's earliest defined time.
pub fn predict_trace(
    config: &SystemConfig,
    surfaces: &CoefficientSurfaces,
    times: &[f64],
) -> Result<Vec<f64>> {
    surfaces.validate()?;
    let eval = EvaluationOptions::default();
    for (i, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < eval.t_min {
            return Err(Error::input(format!(
                "time {t} at sample {i} is below the model's earliest defined time {}",
                eval.t_min
            )));
        }
    }
    if !config.in_calibrated_hull() {
        log::warn!(
            "config (d={} m, s={} ms, v={} V) is outside the calibrated box; \
             the coefficient surfaces are extrapolating",
            config.distance_m,
            config.spray_ms,
            config.init_voltage_v
        );
    }
    let coeffs = surfaces.coefficients_at(config);
    Ok(times
        .iter()
        .map(|&t| {
            response_unchecked(
                t,
                coeffs.amplitude,
                coeffs.diffusion,
                coeffs.velocity,
                config.distance_m,
                &eval,
            )
        })
        .collect())
}

// ====================================================================
// Tests
// ====================================================================
