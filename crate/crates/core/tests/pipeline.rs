//! End-to-end flows through the public API: synthetic datasets travel
//! through the text format, the five-stage calibration inverts its own
//! generator, and the Monte Carlo machinery converges on the model it
//! samples from.

use molchan::{
    calibrate, generate_dataset, mean_trace, parse_trace, predict_trace, write_trace,
    CoefficientSurfaces, FitOptions, NoiseSpec, ParameterGrid, SurfaceBetas, SystemConfig, Trace,
    AGGREGATE_TRIAL_ID, REFERENCE_SURFACES,
};

/// Surfaces with the amplitude plane lifted so it is positive everywhere on
/// the grid — a generator whose datasets are cleanly invertible.
fn positive_amplitude_surfaces() -> CoefficientSurfaces {
    CoefficientSurfaces {
        amplitude: SurfaceBetas {
            beta_0: 5.35,
            ..REFERENCE_SURFACES.amplitude
        },
        ..REFERENCE_SURFACES
    }
}

fn reduced_grid() -> ParameterGrid {
    ParameterGrid {
        distances: vec![2.0, 3.5, 5.0],
        spray_durations: vec![50.0, 200.0],
        init_voltages: vec![1.0, 1.9],
    }
}

fn time_grid(step: f64) -> Vec<f64> {
    let n = ((60.0 - 0.5) / step).round() as usize;
    (0..=n).map(|i| 0.5 + i as f64 * step).collect()
}

fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
    assert!(
        (got - want).abs() <= tol * want.abs().max(1.0),
        "{what}: {got} vs {want}"
    );
}

fn assert_surfaces_close(got: &CoefficientSurfaces, want: &CoefficientSurfaces, tol: f64) {
    let pairs = [
        (got.amplitude.beta_d, want.amplitude.beta_d, "f beta_d"),
        (got.amplitude.beta_s, want.amplitude.beta_s, "f beta_s"),
        (got.amplitude.beta_v, want.amplitude.beta_v, "f beta_v"),
        (got.amplitude.beta_0, want.amplitude.beta_0, "f beta_0"),
        (got.velocity.beta_d, want.velocity.beta_d, "g beta_d"),
        (got.velocity.beta_v, want.velocity.beta_v, "g beta_v"),
        (got.velocity.beta_0, want.velocity.beta_0, "g beta_0"),
        (got.b_star, want.b_star, "b_star"),
    ];
    for (g, w, name) in pairs {
        assert_close(g, w, tol, name);
    }
}

// ====================================================================
// Noiseless inversion through the file format
// ====================================================================

#[test]
fn calibration_inverts_a_noiseless_dataset_after_a_file_round_trip() {
    let truth = positive_amplitude_surfaces();
    let mut spec = NoiseSpec::new(truth);
    spec.sigma_zero = true;
    let times = time_grid(0.5);

    let dataset = generate_dataset(&reduced_grid(), &spec, 1, &times, 11).unwrap();
    assert_eq!(dataset.len(), 12);

    // Ship every trace through the text format before calibrating.
    let reloaded: Vec<Trace> = dataset
        .iter()
        .map(|t| parse_trace(&write_trace(t)).unwrap())
        .collect();
    assert_eq!(reloaded, dataset);

    let result = calibrate(&reloaded, &FitOptions::default()).unwrap();

    assert_surfaces_close(&result.surfaces, &truth, 1e-6);
    // Amplitude noise is off, so the σ plane regresses onto zero spread.
    assert!(
        result
            .surfaces
            .sigma
            .eval(&SystemConfig::new(3.0, 100.0, 1.3).unwrap())
            .abs()
            < 1e-9
    );
    assert_eq!(result.table.len(), 12);
    assert_eq!(result.per_trace_fits.len(), 12);
    for record in &result.per_trace_fits {
        assert!(record.free.converged && record.fixed.converged);
        assert_eq!(record.fixed.coefficients.diffusion, result.surfaces.b_star);
    }
    assert!(result.residuals.amplitude_rmse < 1e-9);
    assert!(result.residuals.velocity_rmse < 1e-9);
}

#[test]
fn calibration_is_deterministic() {
    let truth = positive_amplitude_surfaces();
    let spec = NoiseSpec::new(truth);
    let times = time_grid(1.0);
    let grid = ParameterGrid {
        distances: vec![2.0, 4.0],
        spray_durations: vec![50.0, 200.0],
        init_voltages: vec![1.0, 1.6],
    };

    let d1 = generate_dataset(&grid, &spec, 4, &times, 99).unwrap();
    let d2 = generate_dataset(&grid, &spec, 4, &times, 99).unwrap();
    let text1: Vec<String> = d1.iter().map(write_trace).collect();
    let text2: Vec<String> = d2.iter().map(write_trace).collect();
    assert_eq!(text1, text2, "same seed must give byte-identical files");

    let r1 = calibrate(&d1, &FitOptions::default()).unwrap();
    let r2 = calibrate(&d2, &FitOptions::default()).unwrap();
    assert_eq!(r1.surfaces, r2.surfaces);
    assert_eq!(
        r1.table.rows().collect::<Vec<_>>(),
        r2.table.rows().collect::<Vec<_>>()
    );
}

// ====================================================================
// Noisy calibration
// ====================================================================

#[test]
fn noisy_calibration_recovers_velocity_and_diffusion_exactly() {
    // Amplitude noise rescales a trace but leaves its shape — and therefore
    // the fitted (b, c) — untouched, so those recover to solver precision
    // even from a noisy dataset; only the amplitude and σ planes carry
    // Monte Carlo error.
    let truth = positive_amplitude_surfaces();
    let spec = NoiseSpec::new(truth);
    let times = time_grid(0.5);

    let dataset = generate_dataset(&reduced_grid(), &spec, 10, &times, 4242).unwrap();
    let result = calibrate(&dataset, &FitOptions::default()).unwrap();

    assert_close(result.surfaces.b_star, truth.b_star, 1e-6, "b_star");
    assert_close(
        result.surfaces.velocity.beta_d,
        truth.velocity.beta_d,
        1e-6,
        "g beta_d",
    );
    assert_close(
        result.surfaces.velocity.beta_v,
        truth.velocity.beta_v,
        1e-6,
        "g beta_v",
    );
    assert_close(
        result.surfaces.velocity.beta_0,
        truth.velocity.beta_0,
        1e-6,
        "g beta_0",
    );

    // Amplitude plane: 10 trials of σ ≈ 0.3–0.6 noise leaves a few-percent
    // wobble on the plane over this seed; the bound has wide margin.
    assert_close(
        result.surfaces.amplitude.beta_0,
        truth.amplitude.beta_0,
        0.5,
        "f beta_0",
    );
    for row in result.table.rows() {
        assert_eq!(row.trial_count, 10);
        let predicted = truth.amplitude.eval(&row.config);
        assert_close(row.mean_a, predicted, 0.5, "per-config mean amplitude");
    }
}

// ====================================================================
// Monte Carlo averaging
// ====================================================================

#[test]
fn trial_averaging_converges_on_the_prediction() {
    let truth = positive_amplitude_surfaces();
    let spec = NoiseSpec::new(truth);
    let config_grid = ParameterGrid {
        distances: vec![3.0],
        spray_durations: vec![150.0],
        init_voltages: vec![1.3],
    };
    let times = time_grid(1.0);

    let dataset = generate_dataset(&config_grid, &spec, 200, &times, 7).unwrap();
    let mean = mean_trace(&dataset).unwrap();
    assert_eq!(mean.trial_id, AGGREGATE_TRIAL_ID);

    let config = SystemConfig::new(3.0, 150.0, 1.3).unwrap();
    let predicted = predict_trace(&config, &truth, &times).unwrap();
    // σ(3, 150, 1.3) ≈ 0.49 on an amplitude of ≈ 4.2: the 200-trial mean
    // sits within a fraction of a percent of the prediction.
    for (m, p) in mean.values.iter().zip(&predicted) {
        assert_close(*m, *p, 0.01, "averaged trace sample");
    }
}
