//! Trace and surfaces file formats, the measurement-campaign parameter grid,
//! trial averaging, and synthetic dataset generation.
//!
//! Trace files are UTF-8 text with LF newlines:
//!
//! ```text
//! # distance_m=2
//! # spray_ms=150
//! # init_voltage_V=1.3
//! # trial=1
//! time_s,value
//! 0.5,414.18
//! ...
//! ```
//!
//! The four metadata lines may appear in any order on input (each exactly
//! once) and are written in the canonical order above. Every number is
//! formatted as the shortest decimal that round-trips the binary value, so
//! `parse ∘ write` is the identity and rewritten files are byte-identical.
//!
//! Surfaces files are key-value text (`f_beta_d=-0.4188` …) holding the
//! twelve calibration constants; blank lines and `#` comments are ignored on
//! input.

use crate::error::{Error, Result};
use crate::estimate::Trace;
use crate::model::{CoefficientSurfaces, SurfaceBetas, SystemConfig, VelocityBetas};
use crate::noise::{generate_noisy_trace, NoiseSpec};

// ====================================================================
// Domain types
// ====================================================================

/// Sentinel trial number marking a trace as an average over trials rather
/// than a recorded trial.
pub const AGGREGATE_TRIAL_ID: u32 = u32::MAX;

/// Axes of a measurement campaign: every combination of the three parameter
/// lists is one config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGrid {
    /// Transmitter-to-sensor distances in meters.
    pub distances: Vec<f64>,
    /// Spray durations in milliseconds.
    pub spray_durations: Vec<f64>,
    /// Initial sensor voltages in volts.
    pub init_voltages: Vec<f64>,
}

impl ParameterGrid {
    /// Checks that every axis is non-empty.
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("distances", &self.distances),
            ("spray_durations", &self.spray_durations),
            ("init_voltages", &self.init_voltages),
        ] {
            if axis.is_empty() {
                return Err(Error::input(format!("grid axis {name} must be non-empty")));
            }
        }
        Ok(())
    }
}

impl Default for ParameterGrid {
    /// The 4 × 4 × 4 grid of the reference measurement campaign.
    fn default() -> Self {
        ParameterGrid {
            distances: vec![2.0, 3.0, 4.0, 5.0],
            spray_durations: vec![50.0, 100.0, 150.0, 200.0],
            init_voltages: vec![1.0, 1.3, 1.6, 1.9],
        }
    }
}

// ====================================================================
// Grid enumeration
// ====================================================================

/// Cartesian product of the grid axes in lexicographic order
/// (distance outermost, then spray duration, then voltage).
///
/// # Errors
/// Input error when an axis is empty or holds an invalid parameter value.
pub fn enumerate_grid(grid: &ParameterGrid) -> Result<Vec<SystemConfig>> {
    grid.validate()?;
    let mut out = Vec::with_capacity(
        grid.distances.len() * grid.spray_durations.len() * grid.init_voltages.len(),
    );
    for &d in &grid.distances {
        for &s in &grid.spray_durations {
            for &v in &grid.init_voltages {
                out.push(SystemConfig::new(d, s, v)?);
            }
        }
    }
    Ok(out)
}

// ====================================================================
// Trace files
// ====================================================================

/// Metadata keys of a trace file, in canonical order.
const TRACE_KEYS: [&str; 4] = ["distance_m", "spray_ms", "init_voltage_V", "trial"];

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses one trace file.
///
/// Strict about content (all four metadata keys exactly once, exact column
/// header, two fields per row, finite numbers, strictly increasing times) and
/// lenient only about surrounding whitespace. Errors carry the 1-based line
/// number.
pub fn parse_trace(text: &str) -> Result<Trace> {
    let mut meta: [Option<(String, usize)>; 4] = [None, None, None, None];
    let mut header_seen = false;
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut line_count = 0;

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        line_count = line_no;
        if !header_seen {
            if let Some(rest) = line.strip_prefix('#') {
                let body = rest.trim();
                let (key, value) = body.split_once('=').ok_or_else(|| {
                    parse_err(
                        line_no,
                        format!("metadata line must look like `# key=value`, got `{line}`"),
                    )
                })?;
                let key = key.trim();
                let value = value.trim();
                let slot = TRACE_KEYS
                    .iter()
                    .position(|&k| k == key)
                    .ok_or_else(|| parse_err(line_no, format!("unknown metadata key `{key}`")))?;
                if meta[slot].is_some() {
                    return Err(parse_err(
                        line_no,
                        format!("duplicate metadata key `{key}`"),
                    ));
                }
                meta[slot] = Some((value.to_string(), line_no));
                continue;
            }
            // First non-metadata line: all keys must be present and this must
            // be the column header.
            for (slot, key) in TRACE_KEYS.iter().enumerate() {
                if meta[slot].is_none() {
                    return Err(parse_err(
                        line_no,
                        format!("missing metadata key `{key}` before the column header"),
                    ));
                }
            }
            if line.trim() != "time_s,value" {
                return Err(parse_err(
                    line_no,
                    format!("expected the column header `time_s,value`, got `{line}`"),
                ));
            }
            header_seen = true;
            continue;
        }

        // Data row.
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(parse_err(
                line_no,
                format!("expected 2 comma-separated fields, got {}", fields.len()),
            ));
        }
        let t: f64 = fields[0].trim().parse().map_err(|_| {
            parse_err(
                line_no,
                format!("time_s must be a decimal number, got `{}`", fields[0]),
            )
        })?;
        if !t.is_finite() || t < 0.0 {
            return Err(parse_err(
                line_no,
                format!("time_s must be finite and ≥ 0, got {t}"),
            ));
        }
        if let Some(&last) = times.last() {
            if t <= last {
                return Err(parse_err(
                    line_no,
                    format!("times must be strictly increasing, but {t} follows {last}"),
                ));
            }
        }
        let v: f64 = fields[1].trim().parse().map_err(|_| {
            parse_err(
                line_no,
                format!("value must be a decimal number, got `{}`", fields[1]),
            )
        })?;
        if !v.is_finite() {
            return Err(parse_err(line_no, format!("value must be finite, got {v}")));
        }
        times.push(t);
        values.push(v);
    }

    if !header_seen {
        let line_no = line_count + 1;
        for (slot, key) in TRACE_KEYS.iter().enumerate() {
            if meta[slot].is_none() {
                return Err(parse_err(line_no, format!("missing metadata key `{key}`")));
            }
        }
        return Err(parse_err(
            line_no,
            "expected the column header `time_s,value`",
        ));
    }

    // Metadata values, each validated against its own line.
    let decimal = |slot: usize| -> Result<(f64, usize)> {
        let (raw, line_no) = meta[slot].as_ref().expect("presence checked above");
        let x: f64 = raw.parse().map_err(|_| {
            parse_err(
                *line_no,
                format!("{} must be a decimal number, got `{raw}`", TRACE_KEYS[slot]),
            )
        })?;
        if !x.is_finite() || x <= 0.0 {
            return Err(parse_err(
                *line_no,
                format!(
                    "{} must be a positive finite number, got {x}",
                    TRACE_KEYS[slot]
                ),
            ));
        }
        Ok((x, *line_no))
    };
    let (distance_m, _) = decimal(0)?;
    let (spray_ms, _) = decimal(1)?;
    let (init_voltage_v, _) = decimal(2)?;
    let (trial_raw, trial_line) = meta[3].as_ref().expect("presence checked above");
    let trial_id: u32 = trial_raw.parse().map_err(|_| {
        parse_err(
            *trial_line,
            format!("trial must be a non-negative integer, got `{trial_raw}`"),
        )
    })?;

    let config = SystemConfig::new(distance_m, spray_ms, init_voltage_v)?;
    Trace::new(times, values, config, trial_id)
}

/// Renders a trace in canonical form: metadata in fixed order, the column
/// header, one row per sample, LF newlines, shortest round-trip decimals.
pub fn write_trace(trace: &Trace) -> String {
    let mut out = format!(
        "# distance_m={}\n# spray_ms={}\n# init_voltage_V={}\n# trial={}\ntime_s,value\n",
        trace.config.distance_m, trace.config.spray_ms, trace.config.init_voltage_v, trace.trial_id
    );
    for (t, v) in trace.times.iter().zip(&trace.values) {
        out.push_str(&format!("{t},{v}\n"));
    }
    out
}

// ====================================================================
// Surfaces files
// ====================================================================

/// Keys of a surfaces file, in canonical order: amplitude plane, velocity
/// plane, noise-σ plane, shared diffusion.
const SURFACE_KEYS: [&str; 12] = [
    "f_beta_d", "f_beta_s", "f_beta_v", "f_beta_0", "g_beta_d", "g_beta_v", "g_beta_0", "L_beta_d",
    "L_beta_s", "L_beta_v", "L_beta_0", "b_star",
];

/// Parses a surfaces file: `key=value` lines, blank lines and `#` comments
/// ignored, every key exactly once.
///
/// # Errors
/// Parse error (with line number) for malformed, unknown, or duplicate
/// entries; input error for missing keys or a non-positive `b_star`.
pub fn parse_surfaces(text: &str) -> Result<CoefficientSurfaces> {
    let mut vals: [Option<f64>; 12] = [None; 12];
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key=value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let slot = SURFACE_KEYS
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| parse_err(line_no, format!("unknown surfaces key `{key}`")))?;
        if vals[slot].is_some() {
            return Err(parse_err(
                line_no,
                format!("duplicate surfaces key `{key}`"),
            ));
        }
        let x: f64 = value.parse().map_err(|_| {
            parse_err(
                line_no,
                format!("{key} must be a decimal number, got `{value}`"),
            )
        })?;
        if !x.is_finite() {
            return Err(parse_err(line_no, format!("{key} must be finite, got {x}")));
        }
        vals[slot] = Some(x);
    }
    for (slot, key) in SURFACE_KEYS.iter().enumerate() {
        if vals[slot].is_none() {
            return Err(Error::input(format!(
                "surfaces file is missing key `{key}`"
            )));
        }
    }
    let v = |slot: usize| vals[slot].expect("presence checked above");
    let b_star = v(11);
    if b_star <= 0.0 {
        return Err(Error::input(format!(
            "b_star must be positive, got {b_star}"
        )));
    }
    Ok(CoefficientSurfaces {
        amplitude: SurfaceBetas {
            beta_d: v(0),
            beta_s: v(1),
            beta_v: v(2),
            beta_0: v(3),
        },
        velocity: VelocityBetas {
            beta_d: v(4),
            beta_v: v(5),
            beta_0: v(6),
        },
        sigma: SurfaceBetas {
            beta_d: v(7),
            beta_s: v(8),
            beta_v: v(9),
            beta_0: v(10),
        },
        b_star,
    })
}

/// Renders surfaces in canonical form: one `key=value` line per constant in
/// [`SURFACE_KEYS`] order, LF newlines, shortest round-trip decimals.
pub fn write_surfaces(surfaces: &CoefficientSurfaces) -> String {
    let f = &surfaces.amplitude;
    let g = &surfaces.velocity;
    let l = &surfaces.sigma;
    format!(
        "f_beta_d={}\nf_beta_s={}\nf_beta_v={}\nf_beta_0={}\n\
         g_beta_d={}\ng_beta_v={}\ng_beta_0={}\n\
         L_beta_d={}\nL_beta_s={}\nL_beta_v={}\nL_beta_0={}\n\
         b_star={}\n",
        f.beta_d,
        f.beta_s,
        f.beta_v,
        f.beta_0,
        g.beta_d,
        g.beta_v,
        g.beta_0,
        l.beta_d,
        l.beta_s,
        l.beta_v,
        l.beta_0,
        surfaces.b_star
    )
}

// ====================================================================
// Trial averaging
// ====================================================================

/// Pointwise arithmetic mean of several trials recorded on the same time
/// grid at the same config. The result carries [`AGGREGATE_TRIAL_ID`].
///
/// # Errors
/// Input error when no traces are given, or when configs or time grids
/// differ.
pub fn mean_trace(traces: &[Trace]) -> Result<Trace> {
    let first = traces
        .first()
        .ok_or_else(|| Error::input("cannot average zero traces"))?;
    for (i, t) in traces.iter().enumerate().skip(1) {
        if t.config != first.config {
            return Err(Error::input(format!(
                "trace {i} was recorded at a different config than trace 0"
            )));
        }
        if t.times != first.times {
            return Err(Error::input(format!(
                "trace {i} uses a different time grid than trace 0"
            )));
        }
    }
    let n = traces.len() as f64;
    let values: Vec<f64> = (0..first.len())
        .map(|k| traces.iter().map(|t| t.values[k]).sum::<f64>() / n)
        .collect();
    Trace::new(
        first.times.clone(),
        values,
        first.config,
        AGGREGATE_TRIAL_ID,
    )
}

// ====================================================================
// Synthetic dataset generation
// ====================================================================

/// One round of the splitmix64 mixing function.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-trace seed for dataset generation, derived by chaining splitmix64
/// over the root seed, the config's position in the grid enumeration, and
/// the 1-based trial number:
///
/// ```text
/// s₀ = splitmix64(root_seed ⊕ 0x9E3779B97F4A7C15)
/// s₁ = splitmix64(s₀ ⊕ config_index)
/// s₂ = splitmix64(s₁ ⊕ trial_index)      → the trace seed
/// ```
///
/// where `splitmix64(x)` adds `0x9E3779B97F4A7C15` and applies the standard
/// 30/27/31-shift multiply mix. The chain is stated exactly so the stream
/// structure is reproducible; the noise values themselves additionally depend
/// on the generator driven by the seed.
pub fn derive_trace_seed(root_seed: u64, config_index: u64, trial_index: u64) -> u64 {
    let s0 = splitmix64(root_seed ^ 0x9E37_79B9_7F4A_7C15);
    let s1 = splitmix64(s0 ^ config_index);
    splitmix64(s1 ^ trial_index)
}

/// Generates a full synthetic calibration dataset: `trials_per_config`
/// randomized trials (trial numbers 1..=`trials_per_config`) at every grid
/// config, in grid order with trials innermost. Each trace gets its own seed
/// from [`derive_trace_seed`], making the dataset a pure function of the
/// arguments.
///
/// # Errors
/// Input error when `trials_per_config` is 0, the grid is invalid, or the
/// times are rejected by trace generation.
pub fn generate_dataset(
    grid: &ParameterGrid,
    spec: &NoiseSpec,
    trials_per_config: u32,
    times: &[f64],
    rng_seed: u64,
) -> Result<Vec<Trace>> {
    if trials_per_config < 1 {
        return Err(Error::input("trials_per_config must be at least 1"));
    }
    let configs = enumerate_grid(grid)?;
    let mut out = Vec::with_capacity(configs.len() * trials_per_config as usize);
    for (config_index, config) in configs.iter().enumerate() {
        for trial in 1..=trials_per_config {
            let seed = derive_trace_seed(rng_seed, config_index as u64, trial as u64);
            let mut trace = generate_noisy_trace(config, spec, times, seed)?;
            trace.trial_id = trial;
            out.push(trace);
        }
    }
    Ok(out)
}

// ====================================================================
// Tests
// ====================================================================
