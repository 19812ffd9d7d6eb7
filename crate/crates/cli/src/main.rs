//! `molchan` — command-line front end for the sprayed-chemical channel
//! toolkit: fit single traces, run the full calibration over a dataset
//! directory, predict and simulate responses, sample the amplitude noise,
//! verify recorded trials against the model, and print the measurement grid.
//!
//! Exit codes: 0 success, 1 input/IO error, 2 numerical non-convergence.
//! `MOLCHAN_LOG` (off|info|debug) controls diagnostics on stderr.

mod svg;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use molchan::{
    calibrate, enumerate_grid, fit_channel, fit_channel_fixed_b, generate_dataset,
    generate_noisy_trace, impulse_response, mean_trace, noise_stats, parse_surfaces, parse_trace,
    predict_trace, rmse, sample_noise, write_surfaces, write_trace, CoefficientSurfaces,
    FitOptions, FitResult, NoiseSpec, ParameterGrid, SystemConfig, Trace, REFERENCE_SURFACES,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

// ====================================================================
// Command-line grammar
// ====================================================================

#[derive(Parser)]
#[command(
    name = "molchan",
    version,
    about = "Calibration and simulation toolkit for a sprayed-chemical sensor link"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit channel coefficients (a, b, c) to one recorded trace
    Fit(FitArgs),
    /// Run the five-stage calibration over a directory of trace files
    Calibrate(CalibrateArgs),
    /// Evaluate the calibrated response at one config over a time grid
    Predict(PredictArgs),
    /// Generate synthetic traces — one config or a full dataset
    Simulate(SimulateArgs),
    /// Sample the amplitude-noise distribution at a config
    Noise(NoiseArgs),
    /// Compare recorded trials against the model prediction
    Verify(VerifyArgs),
    /// Print the measurement grid as CSV
    Grid(GridArgs),
}

/// The (distance, spray, voltage) triple naming a system config.
#[derive(Args)]
struct ConfigFlags {
    /// Transmitter-to-sensor distance in meters
    #[arg(long)]
    distance: f64,
    /// Spray duration in milliseconds
    #[arg(long)]
    spray: f64,
    /// Initial sensor voltage in volts
    #[arg(long)]
    voltage: f64,
}

impl ConfigFlags {
    fn to_config(&self) -> Result<SystemConfig> {
        Ok(SystemConfig::new(self.distance, self.spray, self.voltage)?)
    }
}

/// Uniform time grid `t_i = t_start + i · t_step` up to `t_end`.
#[derive(Args)]
struct TimeGridFlags {
    /// First sample time in seconds
    #[arg(long, default_value_t = 0.5)]
    t_start: f64,
    /// Last sample time in seconds
    #[arg(long, default_value_t = 60.0)]
    t_end: f64,
    /// Sample spacing in seconds
    #[arg(long, default_value_t = 0.1)]
    t_step: f64,
}

impl TimeGridFlags {
    fn build(&self) -> Result<Vec<f64>> {
        if !self.t_step.is_finite() || self.t_step <= 0.0 {
            bail!("--t-step must be a positive number of seconds");
        }
        if !self.t_start.is_finite() || !self.t_end.is_finite() || self.t_end < self.t_start {
            bail!("--t-end must be at least --t-start");
        }
        // The slop absorbs division rounding so 59.5/0.1 still counts as 595
        // whole steps.
        let count = ((self.t_end - self.t_start) / self.t_step + 1e-6).floor() as usize;
        Ok((0..=count)
            .map(|i| self.t_start + i as f64 * self.t_step)
            .collect())
    }
}

/// Where the coefficient surfaces come from.
#[derive(Args)]
struct SurfacesFlag {
    /// Surfaces file path, or `paper` for the published reference constants
    #[arg(long, default_value = "paper")]
    surfaces: String,
}

impl SurfacesFlag {
    fn load(&self) -> Result<CoefficientSurfaces> {
        if self.surfaces == "paper" {
            return Ok(REFERENCE_SURFACES);
        }
        let text = fs::read_to_string(&self.surfaces)
            .with_context(|| format!("cannot read surfaces file {}", self.surfaces))?;
        Ok(parse_surfaces(&text)?)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Trace file to fit
    trace: PathBuf,
    /// Pin the diffusion coefficient at this value instead of fitting it
    #[arg(long)]
    fixed_b: Option<f64>,
    /// Ignore samples earlier than this time (seconds)
    #[arg(long)]
    fit_start: Option<f64>,
    /// Iteration budget for the solver
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Relative SSE improvement below which the solver stops
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the per-sample residual table to this CSV file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory of trace files (*.csv), read in file-name order
    dir: PathBuf,
    /// Write the fitted surfaces to this file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-config coefficient table to this CSV file
    #[arg(long)]
    table: Option<PathBuf>,
    /// Ignore samples earlier than this time (seconds)
    #[arg(long)]
    fit_start: Option<f64>,
    /// Iteration budget for each fit
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Relative SSE improvement below which each fit stops
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    surfaces: SurfacesFlag,
    #[command(flatten)]
    times: TimeGridFlags,
    /// Write the curve to this CSV file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a line-chart SVG of the curve
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generate the full grid × trials dataset into --out (a directory)
    #[arg(long)]
    dataset: bool,
    /// Transmitter-to-sensor distance in meters (single-config mode)
    #[arg(long)]
    distance: Option<f64>,
    /// Spray duration in milliseconds (single-config mode)
    #[arg(long)]
    spray: Option<f64>,
    /// Initial sensor voltage in volts (single-config mode)
    #[arg(long)]
    voltage: Option<f64>,
    /// Trial number recorded in a single-config trace
    #[arg(long, default_value_t = 1)]
    trial: u32,
    /// Trials per config in dataset mode
    #[arg(long, default_value_t = 10)]
    trials: u32,
    /// Override the distance axis of the grid (comma-separated meters)
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    /// Override the spray axis of the grid (comma-separated milliseconds)
    #[arg(long, value_delimiter = ',')]
    sprays: Option<Vec<f64>>,
    /// Override the voltage axis of the grid (comma-separated volts)
    #[arg(long, value_delimiter = ',')]
    voltages: Option<Vec<f64>>,
    /// Disable noise: traces equal the model prediction exactly
    #[arg(long)]
    sigma_zero: bool,
    /// Root seed for the per-trace noise streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    surfaces: SurfacesFlag,
    #[command(flatten)]
    times: TimeGridFlags,
    /// Output file (single config) or directory (--dataset)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    surfaces: SurfacesFlag,
    /// Number of draws
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Seed for the draw stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the raw samples to this CSV file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Directory of recorded trace files
    dir: PathBuf,
    #[command(flatten)]
    config: ConfigFlags,
    #[command(flatten)]
    surfaces: SurfacesFlag,
    /// Write the comparison table to this CSV file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write an observed-vs-predicted SVG chart
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Override the distance axis (comma-separated meters)
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    /// Override the spray axis (comma-separated milliseconds)
    #[arg(long, value_delimiter = ',')]
    sprays: Option<Vec<f64>>,
    /// Override the voltage axis (comma-separated volts)
    #[arg(long, value_delimiter = ',')]
    voltages: Option<Vec<f64>>,
    /// Write the CSV to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

// ====================================================================
// Entry point and shared plumbing
// ====================================================================

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // --help/--version land here too; only real usage errors are
            // input errors.
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOLCHAN_LOG", "off"))
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Fit(args) => cmd_fit(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Noise(args) => cmd_noise(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Grid(args) => cmd_grid(args),
    }
}

/// 2 for numerical non-convergence anywhere in the chain, otherwise 1.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(lib) = cause.downcast_ref::<molchan::Error>() {
            if matches!(lib, molchan::Error::Numerical { .. }) {
                return 2;
            }
            if let molchan::Error::CalibrationStage { source, .. } = lib {
                if matches!(**source, molchan::Error::Numerical { .. }) {
                    return 2;
                }
            }
        }
    }
    1
}

/// Writes to the given path, or prints to stdout when there is none.
fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_trace_file(path: &Path) -> Result<Trace> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read trace file {}", path.display()))?;
    parse_trace(&text).with_context(|| format!("in trace file {}", path.display()))
}

/// All `*.csv` files of a directory, sorted by file name for deterministic
/// dataset order.
fn read_trace_dir(dir: &Path) -> Result<Vec<Trace>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("cannot read directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no trace files (*.csv) in {}", dir.display());
    }
    paths.iter().map(|p| read_trace_file(p)).collect()
}

fn fit_options(
    fit_start: Option<f64>,
    max_iterations: Option<usize>,
    tolerance: Option<f64>,
) -> FitOptions {
    let mut options = FitOptions {
        fit_window_start: fit_start,
        ..FitOptions::default()
    };
    if let Some(budget) = max_iterations {
        options.max_iterations = budget;
    }
    if let Some(tol) = tolerance {
        options.relative_sse_tolerance = tol;
    }
    options
}

fn grid_from_overrides(
    distances: Option<Vec<f64>>,
    sprays: Option<Vec<f64>>,
    voltages: Option<Vec<f64>>,
) -> ParameterGrid {
    let mut grid = ParameterGrid::default();
    if let Some(d) = distances {
        grid.distances = d;
    }
    if let Some(s) = sprays {
        grid.spray_durations = s;
    }
    if let Some(v) = voltages {
        grid.init_voltages = v;
    }
    grid
}

fn warn_if_outside_hull(config: &SystemConfig) {
    if !config.in_calibrated_hull() {
        eprintln!(
            "warning: config (d={} m, s={} ms, v={} V) lies outside the calibrated grid; \
             the surfaces extrapolate there",
            config.distance_m, config.spray_ms, config.init_voltage_v
        );
    }
}

// ====================================================================
// Subcommands
// ====================================================================

fn cmd_fit(args: FitArgs) -> Result<u8> {
    let trace = read_trace_file(&args.trace)?;
    let options = fit_options(args.fit_start, args.max_iterations, args.tolerance);
    let fit: FitResult = match args.fixed_b {
        Some(b_star) => fit_channel_fixed_b(&trace, b_star, &options)?,
        None => fit_channel(&trace, &options)?,
    };

    println!("a={}", fit.coefficients.amplitude);
    println!("b={}", fit.coefficients.diffusion);
    println!("c={}", fit.coefficients.velocity);
    println!("rmse={}", fit.rmse);
    println!("sse={}", fit.sse);
    println!("iterations={}", fit.iterations);
    println!("converged={}", fit.converged);

    if let Some(path) = &args.out {
        let mut csv = String::from("time_s,observed,predicted,residual\n");
        for (&t, &observed) in trace.times.iter().zip(&trace.values) {
            if t < options.eval.t_min {
                continue;
            }
            let predicted =
                impulse_response(t, &fit.coefficients, trace.config.distance_m, &options.eval)?;
            csv.push_str(&format!(
                "{t},{observed},{predicted},{}\n",
                observed - predicted
            ));
        }
        fs::write(path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }

    Ok(if fit.converged { 0 } else { 2 })
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<u8> {
    let traces = read_trace_dir(&args.dir)?;
    let options = fit_options(args.fit_start, args.max_iterations, args.tolerance);
    let result = calibrate(&traces, &options)?;

    println!("traces={}", traces.len());
    println!("configs={}", result.table.len());
    println!("b_star={}", result.surfaces.b_star);
    println!(
        "amplitude_residual_rmse={}",
        result.residuals.amplitude_rmse
    );
    println!("velocity_residual_rmse={}", result.residuals.velocity_rmse);
    println!("sigma_residual_rmse={}", result.residuals.sigma_rmse);

    if let Some(path) = &args.out {
        fs::write(path, write_surfaces(&result.surfaces))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    if let Some(path) = &args.table {
        let mut csv = String::from("distance_m,spray_ms,init_voltage_V,mean_a,std_a,mean_c\n");
        for row in result.table.rows() {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.config.distance_m,
                row.config.spray_ms,
                row.config.init_voltage_v,
                row.mean_a,
                row.std_a,
                row.mean_c
            ));
        }
        fs::write(path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_predict(args: PredictArgs) -> Result<u8> {
    let config = args.config.to_config()?;
    let surfaces = args.surfaces.load()?;
    let times = args.times.build()?;
    warn_if_outside_hull(&config);

    let values = predict_trace(&config, &surfaces, &times)?;
    let mut csv = String::from("time_s,value\n");
    for (t, v) in times.iter().zip(&values) {
        csv.push_str(&format!("{t},{v}\n"));
    }
    emit(&args.out, &csv)?;

    if let Some(path) = &args.svg {
        let chart = svg::line_chart(
            &format!(
                "predicted response at d={} m, s={} ms, v={} V",
                config.distance_m, config.spray_ms, config.init_voltage_v
            ),
            "time (s)",
            "sensor response",
            &[svg::Series {
                label: "predicted",
                times: &times,
                values: &values,
            }],
        );
        fs::write(path, chart).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let surfaces = args.surfaces.load()?;
    let times = args.times.build()?;
    let mut spec = NoiseSpec::new(surfaces);
    spec.sigma_zero = args.sigma_zero;

    if args.dataset {
        let Some(dir) = &args.out else {
            bail!("--dataset needs --out <directory>");
        };
        let grid = grid_from_overrides(args.distances, args.sprays, args.voltages);
        let dataset = generate_dataset(&grid, &spec, args.trials, &times, args.seed)?;
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create directory {}", dir.display()))?;
        for (index, trace) in dataset.iter().enumerate() {
            let config_index = index / args.trials as usize;
            let name = format!(
                "trace_{:03}_d{}_s{}_v{}_t{:02}.csv",
                config_index,
                trace.config.distance_m,
                trace.config.spray_ms,
                trace.config.init_voltage_v,
                trace.trial_id
            );
            let path = dir.join(name);
            fs::write(&path, write_trace(trace))
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
        println!("traces={}", dataset.len());
        return Ok(0);
    }

    let (Some(distance), Some(spray), Some(voltage)) = (args.distance, args.spray, args.voltage)
    else {
        bail!("single-config mode needs --distance, --spray, and --voltage (or use --dataset)");
    };
    let config = SystemConfig::new(distance, spray, voltage)?;
    let seed = molchan::derive_trace_seed(args.seed, 0, args.trial as u64);
    let mut trace = generate_noisy_trace(&config, &spec, &times, seed)?;
    trace.trial_id = args.trial;
    emit(&args.out, &write_trace(&trace))?;
    Ok(0)
}

fn cmd_noise(args: NoiseArgs) -> Result<u8> {
    let config = args.config.to_config()?;
    let surfaces = args.surfaces.load()?;
    let spec = NoiseSpec::new(surfaces);
    let sigma = surfaces.sigma_at(&config);

    let set = sample_noise(&config, &spec, args.seed, args.count)?;
    println!("sigma={}", spec.sigma_for(&config));
    println!("clamped={}", sigma.clamped);
    if set.samples.len() >= 2 {
        let (mean, std) = noise_stats(&set)?;
        println!("mean={mean}");
        println!("std={std}");
    }

    if let Some(path) = &args.out {
        let mut csv = String::from("noise\n");
        for sample in &set.samples {
            csv.push_str(&format!("{sample}\n"));
        }
        fs::write(path, csv).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let config = args.config.to_config()?;
    let surfaces = args.surfaces.load()?;
    let traces = read_trace_dir(&args.dir)?;
    let matching: Vec<Trace> = traces.into_iter().filter(|t| t.config == config).collect();
    if matching.is_empty() {
        bail!(
            "no trace in {} was recorded at d={} m, s={} ms, v={} V",
            args.dir.display(),
            config.distance_m,
            config.spray_ms,
            config.init_voltage_v
        );
    }

    let observed = mean_trace(&matching)?;
    let predicted = predict_trace(&config, &surfaces, &observed.times)?;
    let error = rmse(&observed, &predicted)?;

    let mut csv = String::from("time_s,observed_mean,predicted,residual\n");
    for ((&t, &o), &p) in observed.times.iter().zip(&observed.values).zip(&predicted) {
        csv.push_str(&format!("{t},{o},{p},{}\n", o - p));
    }
    csv.push_str(&format!("# rmse={error}\n"));
    if args.out.is_some() {
        println!("trials={}", matching.len());
        println!("rmse={error}");
    }
    emit(&args.out, &csv)?;

    if let Some(path) = &args.svg {
        let chart = svg::line_chart(
            &format!(
                "observed vs predicted at d={} m, s={} ms, v={} V",
                config.distance_m, config.spray_ms, config.init_voltage_v
            ),
            "time (s)",
            "sensor response",
            &[
                svg::Series {
                    label: "observed mean",
                    times: &observed.times,
                    values: &observed.values,
                },
                svg::Series {
                    label: "predicted",
                    times: &observed.times,
                    values: &predicted,
                },
            ],
        );
        fs::write(path, chart).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_grid(args: GridArgs) -> Result<u8> {
    let grid = grid_from_overrides(args.distances, args.sprays, args.voltages);
    let configs = enumerate_grid(&grid)?;
    let mut csv = String::from("distance_m,spray_ms,init_voltage_V\n");
    for config in &configs {
        csv.push_str(&format!(
            "{},{},{}\n",
            config.distance_m, config.spray_ms, config.init_voltage_v
        ));
    }
    emit(&args.out, &csv)?;
    Ok(0)
}
