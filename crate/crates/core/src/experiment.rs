//! Experiment files, parameter sweeps and the files a run leaves behind.
//!
//! An experiment file is JSON:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "system": { "agents": [...], "resources": [...], "noise": [...], "steps": 200000, "seed": 1 },
//!   "sweep": [ { "paths": ["/seed"], "values": [1, 2, 3] } ],
//!   "output_dir": "out"
//! }
//! ```
//!
//! Sweep paths are JSON pointers into `system`. Axes combine as a cross
//! product; several paths on one axis move together, so each value on such
//! an axis is an array with one entry per path.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baseline::{solve_optimum, OptimalAllocation};
use crate::dp::{NoiseSpec, ScaleMode};
use crate::engine::{run_with, StepOutcome};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecorder, RunSummary};
use crate::model::{reference_config, SystemConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Series in a summary file are thinned to this many points.
pub const SUMMARY_SERIES_POINTS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub schema_version: u32,
    pub system: SystemConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub paths: Vec<String>,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Override {
    pub path: String,
    pub value: Value,
}

/// One fully resolved configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub overrides: Vec<Override>,
    pub config: SystemConfig,
}

impl ExperimentFile {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let file: ExperimentFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        prefix_field(self.system.validate(), "system")?;
        for (k, axis) in self.sweep.iter().enumerate() {
            let field = format!("sweep[{k}]");
            if axis.paths.is_empty() {
                return Err(Error::config(
                    format!("{field}.paths"),
                    "must name at least one parameter",
                ));
            }
            if axis.values.is_empty() {
                return Err(Error::config(
                    format!("{field}.values"),
                    "must not be empty",
                ));
            }
            if axis.paths.len() > 1 {
                for (v, value) in axis.values.iter().enumerate() {
                    match value.as_array() {
                        Some(a) if a.len() == axis.paths.len() => {}
                        _ => {
                            return Err(Error::config(
                                format!("{field}.values[{v}]"),
                                format!(
                                    "expected an array of {} values, one per path",
                                    axis.paths.len()
                                ),
                            ))
                        }
                    }
                }
            }
        }
        // Resolving every point checks pointers and the swept values.
        self.points().map(|_| ())
    }

    /// Number of runs the sweep expands to.
    pub fn sweep_size(&self) -> usize {
        self.sweep.iter().map(|a| a.values.len()).product()
    }

    /// Expands the sweep cross product, first axis slowest.
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let base = serde_json::to_value(&self.system)?;
        let total = self.sweep_size();
        let mut points = Vec::with_capacity(total);
        for index in 0..total {
            let mut rest = index;
            let mut picks = vec![0; self.sweep.len()];
            for (k, axis) in self.sweep.iter().enumerate().rev() {
                picks[k] = rest % axis.values.len();
                rest /= axis.values.len();
            }
            let mut doc = base.clone();
            let mut overrides = Vec::new();
            for (k, axis) in self.sweep.iter().enumerate() {
                let value = &axis.values[picks[k]];
                for (p, path) in axis.paths.iter().enumerate() {
                    let v = if axis.paths.len() == 1 {
                        value
                    } else {
                        &value[p]
                    };
                    let slot = doc.pointer_mut(path).ok_or_else(|| {
                        Error::config(
                            format!("sweep[{k}].paths[{p}]"),
                            format!("`{path}` does not name a system parameter"),
                        )
                    })?;
                    *slot = v.clone();
                    overrides.push(Override {
                        path: path.clone(),
                        value: v.clone(),
                    });
                }
            }
            let config: SystemConfig = serde_json::from_value(doc).map_err(|e| {
                Error::config(
                    format!("sweep point {index}"),
                    format!("swept value does not fit: {e}"),
                )
            })?;
            prefix_field(config.validate(), &format!("sweep point {index}: system"))?;
            points.push(SweepPoint {
                index,
                overrides,
                config,
            });
        }
        Ok(points)
    }
}

fn prefix_field(result: Result<()>, prefix: &str) -> Result<()> {
    result.map_err(|e| match e {
        Error::Config { field, message } => Error::Config {
            field: format!("{prefix}.{field}"),
            message,
        },
        other => other,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub steps: Option<u64>,
    /// Upper bound on sweep points run at once; `None` uses all cores.
    pub jobs: Option<usize>,
    pub emit_trace: bool,
    pub out: Option<PathBuf>,
}

/// Summary file contents for one sweep point.
#[derive(Debug, Clone, Serialize)]
pub struct PointReport {
    pub point: usize,
    pub overrides: Vec<Override>,
    pub seed: u64,
    pub steps: u64,
    pub optimum: OptimalAllocation,
    pub summary: RunSummary,
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub points: Vec<Result<PointReport>>,
    pub sweep_table: PathBuf,
}

impl ExperimentReport {
    /// The first failure in point order, if any.
    pub fn first_error(self) -> Option<Error> {
        self.points.into_iter().find_map(|r| r.err())
    }
}

/// Applies command-line overrides to the base system. Swept parameters
/// still take precedence.
pub fn apply_overrides(file: &mut ExperimentFile, opts: &RunOptions) -> Result<()> {
    if let Some(seed) = opts.seed {
        file.system.seed = seed;
    }
    if let Some(steps) = opts.steps {
        file.system.steps = steps;
    }
    file.validate()
}

pub fn point_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("p{index:03}"))
}

/// Runs every sweep point and writes `pNNN/summary.json`, optionally
/// `pNNN/trace.csv`, and `sweep.csv` once all points have finished.
pub fn run_experiment(file: &ExperimentFile, opts: &RunOptions) -> Result<ExperimentReport> {
    let points = file.points()?;
    let out = opts
        .out
        .clone()
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = opts.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<PointReport>> = pool.install(|| {
        points
            .par_iter()
            .map(|p| run_point(p, &point_dir(&out, p.index), opts.emit_trace))
            .collect()
    });

    let sweep_table = out.join("sweep.csv");
    write_sweep_table(&sweep_table, file, &points, &results)?;
    Ok(ExperimentReport {
        out_dir: out,
        points: results,
        sweep_table,
    })
}

/// Runs one configuration and writes its summary (and trace) into `dir`.
pub fn run_point(point: &SweepPoint, dir: &Path, emit_trace: bool) -> Result<PointReport> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config = &point.config;
    let mut recorder = MetricsRecorder::new(config.n_resources());
    let trace_path = dir.join("trace.csv");
    let mut trace = if emit_trace {
        Some(TraceWriter::create(&trace_path, config)?)
    } else {
        None
    };
    let mut trace_err = None;
    let stats = run_with(config, |o| {
        recorder.observe(o);
        if let Some(w) = trace.as_mut() {
            if trace_err.is_none() {
                trace_err = w.write(o).err();
            }
        }
    })?;
    if let Some(e) = trace_err {
        return Err(e);
    }
    if let Some(w) = trace {
        w.finish()?;
    }
    let costs = config.costs();
    let optimum = solve_optimum(&costs, &config.resources)?;

    let summary = recorder
        .finish(&costs, &optimum, &stats)
        .thinned(SUMMARY_SERIES_POINTS);
    let report = PointReport {
        point: point.index,
        overrides: point.overrides.clone(),
        seed: config.seed,
        steps: config.steps,
        optimum,
        summary,
    };
    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Column names of `trace.csv`.
pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "agent",
    "resource",
    "x",
    "xbar",
    "S",
    "lambda_hat",
    "noisy_derivative",
    "dq",
    "cumulative_bits",
];

/// Streams one row per (step, agent, resource).
pub struct TraceWriter {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    ids: Vec<u64>,
}

impl TraceWriter {
    pub fn create(path: &Path, config: &SystemConfig) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        writer.write_record(TRACE_COLUMNS)?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            writer,
            ids: config.agents.iter().map(|a| a.id).collect(),
        })
    }

    pub fn write(&mut self, o: &StepOutcome) -> Result<()> {
        let step = o.step.to_string();
        let bits = o.cumulative_bits.to_string();
        for (i, id) in self.ids.iter().enumerate() {
            let agent = id.to_string();
            for j in 0..o.n_resources() {
                let s = if o.event_bits[j] { "1" } else { "0" };
                self.writer.write_record([
                    step.as_str(),
                    agent.as_str(),
                    &j.to_string(),
                    &fmt_f64(o.x[i][j]),
                    &fmt_f64(o.xbar[i][j]),
                    s,
                    &o.lambda_hat[i][j].map(fmt_f64).unwrap_or_default(),
                    &o.noisy_derivative[i][j].map(fmt_f64).unwrap_or_default(),
                    &fmt_f64(o.sensitivity[j]),
                    bits.as_str(),
                ])?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_sweep_table(
    path: &Path,
    file: &ExperimentFile,
    points: &[SweepPoint],
    results: &[Result<PointReport>],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    let swept: Vec<&String> = file.sweep.iter().flat_map(|a| &a.paths).collect();
    let mut header = vec!["point".to_string()];
    header.extend(swept.iter().map(|p| p.to_string()));
    header.extend(
        [
            "seed",
            "steps",
            "cost_ratio",
            "max_abs_error",
            "max_rel_error",
            "total_bits",
            "status",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for (point, result) in points.iter().zip(results) {
        let mut row = vec![point.index.to_string()];
        row.extend(point.overrides.iter().map(|o| o.value.to_string()));
        row.push(point.config.seed.to_string());
        row.push(point.config.steps.to_string());
        match result {
            Ok(r) => {
                let s = &r.summary;
                let max_abs = s.abs_error.iter().flatten().copied().fold(0.0, f64::max);
                row.push(s.cost_ratio.map(fmt_f64).unwrap_or_default());
                row.push(fmt_f64(max_abs));
                row.push(fmt_f64(s.max_rel_error));
                row.push(s.total_bits.to_string());
                row.push("ok".into());
            }
            Err(e) => {
                row.extend([String::new(), String::new(), String::new(), String::new()]);
                row.push(e.to_string());
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Steps used by the bundled reference experiments.
pub const SUITE_STEPS: u64 = 200_000;
/// Seed of the bundled reference experiments (also fixes cost coefficients).
pub const SUITE_SEED: u64 = 1;

/// The bundled reference experiments, keyed by file name.
pub fn paper_suite() -> Vec<(&'static str, ExperimentFile)> {
    let file = |noise: Vec<NoiseSpec>, sweep: Vec<SweepAxis>| ExperimentFile {
        schema_version: SCHEMA_VERSION,
        system: reference_config(noise, SUITE_STEPS, SUITE_SEED),
        sweep,
        output_dir: None,
    };
    let fixed = |a: f64, b: f64| serde_json::json!([{ "fixed": a }, { "fixed": b }]);
    vec![
        (
            "noiseless.json",
            file(vec![NoiseSpec::none(), NoiseSpec::none()], vec![]),
        ),
        (
            "gaussian.json",
            file(
                vec![
                    NoiseSpec::gaussian(0.2, 0.01, ScaleMode::Calibrated, Some(1.32)),
                    NoiseSpec::gaussian(0.2, 0.01, ScaleMode::Calibrated, Some(2.53)),
                ],
                vec![],
            ),
        ),
        (
            "gaussian_sigma_grid.json",
            file(
                vec![
                    NoiseSpec::gaussian(0.2, 0.01, ScaleMode::Fixed(20.5), None),
                    NoiseSpec::gaussian(0.2, 0.01, ScaleMode::Fixed(39.31), None),
                ],
                vec![
                    SweepAxis {
                        paths: vec!["/noise/0/scale".into(), "/noise/1/scale".into()],
                        values: vec![fixed(20.5, 39.31), fixed(50.0, 70.0), fixed(70.0, 110.0)],
                    },
                    SweepAxis {
                        paths: vec!["/seed".into()],
                        values: vec![1.into(), 2.into(), 3.into()],
                    },
                ],
            ),
        ),
        (
            "laplace.json",
            file(
                vec![
                    NoiseSpec::laplace(0.1, ScaleMode::Calibrated, Some(5.9)),
                    NoiseSpec::laplace(0.1, ScaleMode::Calibrated, Some(6.34)),
                ],
                vec![],
            ),
        ),
    ]
}

/// Writes the bundled reference experiments into `dir`.
pub fn emit_paper_suite(dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    paper_suite()
        .into_iter()
        .map(|(name, file)| {
            let path = dir.join(name);
            file.save(&path)?;
            Ok(path)
        })
        .collect()
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize, W: Write>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io("<output>", e))
}
