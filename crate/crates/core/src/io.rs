//! JSON configuration documents and run exports.
//!
//! A configuration document looks like
//!
//! ```json
//! {
//!   "version": 1,
//!   "L": 20, "r": 4, "B": 3, "T": 36,
//!   "uniform": { "M": 21, "A": 0.01, "R0": 2 },
//!   "theta": [12]
//! }
//! ```
//!
//! with `uniform` replaceable by an explicit `points` list of
//! `{ "alpha", "A", "R0", "inflow_changes"? }` objects. Optional `optimizer`
//! and `rh` sections carry solver settings.
//!
//! Exports are written with Rust's shortest round-trip float formatting, so
//! identical runs produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::horizon::{RhSettings, Search, DEFAULT_GRID_POINTS};
use crate::ipa::GradCheckRow;
use crate::model::{ConfigError, InflowChange, MissionConfig, SamplePoint, SwitchingSchedule};
use crate::optimizer::OptimizerSettings;
use crate::sim::Trajectory;

pub const SCHEMA_VERSION: u32 = 1;

/// A configuration problem, anchored to a 1-based line when it can be.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("{message}{}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
pub struct ParseError {
    pub code: &'static str,
    pub message: String,
    pub line: Option<usize>,
    pub column: Option<usize>,
}

impl ParseError {
    fn at(code: &'static str, message: impl Into<String>, line: Option<usize>) -> Self {
        Self {
            code,
            message: message.into(),
            line,
            column: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid run manifest: {0}")]
    Manifest(&'static str),
    #[error("serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

impl IoError {
    pub fn code(&self) -> &'static str {
        match self {
            IoError::Parse(e) => e.code,
            IoError::File { .. } => "io",
            IoError::Manifest(_) => "manifest",
            IoError::Json(_) => "serialization",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UniformDoc {
    #[serde(rename = "M")]
    count: usize,
    #[serde(rename = "A")]
    inflow: f64,
    #[serde(rename = "R0")]
    initial: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InflowChangeDoc {
    t: f64,
    #[serde(rename = "A")]
    rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointDoc {
    alpha: f64,
    #[serde(rename = "A")]
    inflow: f64,
    #[serde(rename = "R0")]
    initial: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inflow_changes: Vec<InflowChangeDoc>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RhDoc {
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    planning: Option<f64>,
    #[serde(rename = "h", default, skip_serializing_if = "Option::is_none")]
    action: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    search: Option<Search>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    version: u32,
    #[serde(rename = "L")]
    length: f64,
    #[serde(rename = "r")]
    range: f64,
    #[serde(rename = "B")]
    service: f64,
    #[serde(rename = "T")]
    horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uniform: Option<UniformDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<PointDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rh: Option<RhDoc>,
}

/// Everything a configuration document can carry.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mission: MissionConfig,
    pub theta: Option<SwitchingSchedule>,
    pub optimizer: Option<OptimizerSettings>,
    pub rh: Option<RhSettings>,
}

impl RunConfig {
    pub fn new(mission: MissionConfig) -> Self {
        Self {
            mission,
            theta: None,
            optimizer: None,
            rh: None,
        }
    }
}

/// 1-based line of the `nth` occurrence of `"key":` at or after `from`.
fn find_key(text: &str, key: &str, nth: usize, from: usize) -> Option<(usize, usize)> {
    let needle = format!("\"{key}\"");
    let mut seen = 0;
    let mut pos = from.min(text.len());
    while let Some(off) = text[pos..].find(&needle) {
        let at = pos + off;
        pos = at + needle.len();
        if text[pos..].trim_start().starts_with(':') {
            if seen == nth {
                let line = text[..at].matches('\n').count() + 1;
                return Some((line, at));
            }
            seen += 1;
        }
    }
    None
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    find_key(text, key, 0, 0).map(|(l, _)| l)
}

fn point_line(text: &str, index: usize, explicit: bool) -> Option<usize> {
    if !explicit {
        return line_of(text, "uniform");
    }
    let start = find_key(text, "points", 0, 0).map_or(0, |(_, at)| at);
    find_key(text, "alpha", index, start).map(|(l, _)| l)
}

fn anchor(err: ConfigError, text: &str, explicit: bool) -> ParseError {
    let line = match &err {
        ConfigError::NonFinite(field) | ConfigError::NonPositive(field) => line_of(text, field),
        ConfigError::EmptyPoints => line_of(text, if explicit { "points" } else { "uniform" }),
        ConfigError::PositionOutOfRange { index, .. }
        | ConfigError::Unsorted { index }
        | ConfigError::InflowNotBelowService { index, .. }
        | ConfigError::NonPositiveInflow { index, .. }
        | ConfigError::NegativeInitial { index, .. }
        | ConfigError::BadProfile { index, .. } => point_line(text, *index, explicit),
    };
    ParseError::at(err.code(), err.to_string(), line)
}

fn syntax_code(err: &serde_json::Error) -> &'static str {
    let msg = err.to_string();
    if msg.starts_with("missing field") {
        "missing_field"
    } else if msg.starts_with("unknown field") {
        "unknown_field"
    } else {
        match err.classify() {
            serde_json::error::Category::Data => "invalid_value",
            _ => "syntax",
        }
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig, ParseError> {
    let doc: ConfigDoc = serde_json::from_str(text).map_err(|e| ParseError {
        code: syntax_code(&e),
        message: e.to_string(),
        line: Some(e.line()),
        column: Some(e.column()),
    })?;
    if doc.version != SCHEMA_VERSION {
        return Err(ParseError::at(
            "unsupported_version",
            format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                doc.version
            ),
            line_of(text, "version"),
        ));
    }
    let explicit = doc.points.is_some();
    let mission = match (&doc.uniform, &doc.points) {
        (Some(_), Some(_)) => {
            return Err(ParseError::at(
                "conflicting_points",
                "give either `uniform` or `points`, not both",
                line_of(text, "points"),
            ))
        }
        (None, None) => {
            return Err(ParseError::at(
                "missing_field",
                "missing field `uniform` or `points`",
                None,
            ))
        }
        (Some(u), None) => MissionConfig::uniform(
            doc.length,
            doc.range,
            doc.service,
            doc.horizon,
            u.count,
            u.inflow,
            u.initial,
        ),
        (None, Some(points)) => MissionConfig::new(
            doc.length,
            doc.range,
            doc.service,
            doc.horizon,
            points
                .iter()
                .map(|p| SamplePoint {
                    position: p.alpha,
                    inflow: p.inflow,
                    initial: p.initial,
                    inflow_changes: p
                        .inflow_changes
                        .iter()
                        .map(|c| InflowChange {
                            time: c.t,
                            rate: c.rate,
                        })
                        .collect(),
                })
                .collect(),
        ),
    }
    .map_err(|e| anchor(e, text, explicit))?;

    let theta = doc
        .theta
        .map(|t| SwitchingSchedule::new(t, mission.length))
        .transpose()
        .map_err(|e| ParseError::at("invalid_theta", e.to_string(), line_of(text, "theta")))?;
    if let Some(opt) = &doc.optimizer {
        opt.validate().map_err(|e| {
            ParseError::at(
                "invalid_optimizer",
                e.to_string(),
                line_of(text, "optimizer"),
            )
        })?;
    }
    let rh = doc
        .rh
        .map(|r| {
            let defaults = RhSettings::defaults(&mission);
            let planning = r.planning.unwrap_or(defaults.planning);
            let settings = RhSettings {
                planning,
                action: r.action.unwrap_or(0.5 * planning),
                search: r.search.unwrap_or(defaults.search),
                grid_points: r.grid_points.unwrap_or(DEFAULT_GRID_POINTS),
                execution: defaults.execution,
            };
            settings
                .validate(&mission)
                .map(|_| settings)
                .map_err(|e| ParseError::at("invalid_rh", e.to_string(), line_of(text, "rh")))
        })
        .transpose()?;
    Ok(RunConfig {
        mission,
        theta,
        optimizer: doc.optimizer,
        rh,
    })
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_config(&text)?)
}

/// Serializes a configuration with explicit points; `parse_config` of the
/// result reproduces `config` exactly.
pub fn serialize_config(config: &RunConfig) -> Result<String, serde_json::Error> {
    let m = &config.mission;
    let doc = ConfigDoc {
        version: SCHEMA_VERSION,
        length: m.length,
        range: m.range,
        service: m.service,
        horizon: m.horizon,
        uniform: None,
        points: Some(
            m.points
                .iter()
                .map(|p| PointDoc {
                    alpha: p.position,
                    inflow: p.inflow,
                    initial: p.initial,
                    inflow_changes: p
                        .inflow_changes
                        .iter()
                        .map(|c| InflowChangeDoc {
                            t: c.time,
                            rate: c.rate,
                        })
                        .collect(),
                })
                .collect(),
        ),
        theta: config.theta.as_ref().map(|t| t.as_slice().to_vec()),
        optimizer: config.optimizer,
        rh: config.rh.map(|r| RhDoc {
            planning: Some(r.planning),
            action: Some(r.action),
            search: Some(r.search),
            grid_points: Some(r.grid_points),
        }),
    };
    let mut out = serde_json::to_string_pretty(&doc)?;
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Simulate,
    Optimize,
    Rh,
    Gradcheck,
}

/// What was run and where its outputs go.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: Subcommand,
    pub config_path: Option<PathBuf>,
    /// Flag-supplied values, keyed by flag name.
    pub overrides: BTreeMap<String, String>,
    pub output_dir: PathBuf,
    pub sample_dt: f64,
}

impl RunManifest {
    pub fn validate(&self) -> Result<(), IoError> {
        if !(self.sample_dt > 0.0 && self.sample_dt.is_finite()) {
            return Err(IoError::Manifest("sample_dt must be positive and finite"));
        }
        Ok(())
    }
}

/// Contents of `summary.json`. Optional entries are omitted when absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub subcommand: Subcommand,
    #[serde(rename = "J")]
    pub cost: f64,
    pub theta: Vec<f64>,
    #[serde(rename = "N")]
    pub dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(rename = "J_history", skip_serializing_if = "Vec::is_empty")]
    pub cost_history: Vec<f64>,
    #[serde(rename = "N_history", skip_serializing_if = "Vec::is_empty")]
    pub dimension_history: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interior: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub gradient: Vec<GradCheckRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rel_err: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub controls: Vec<(f64, f64)>,
    pub settings: serde_json::Value,
}

impl Summary {
    /// A bare summary for a single simulated trajectory.
    pub fn for_trajectory(subcommand: Subcommand, trajectory: &Trajectory) -> Self {
        Self {
            subcommand,
            cost: trajectory.cost,
            theta: trajectory.theta.clone(),
            dimension: trajectory.theta.len(),
            iterations: None,
            grad_norm: None,
            cost_history: Vec::new(),
            dimension_history: Vec::new(),
            converged: None,
            interior: None,
            gradient: Vec::new(),
            max_rel_err: None,
            controls: Vec::new(),
            settings: serde_json::Value::Null,
        }
    }
}

/// Sample times for `trajectory.csv`: every event and segment boundary plus
/// a uniform grid, sorted, with near-coincident times merged.
pub fn sample_times(trajectory: &Trajectory, sample_dt: f64) -> Vec<f64> {
    let (t0, t1) = (trajectory.t_start, trajectory.t_end);
    let tol = 1e-12 * t1.abs().max(1.0);
    let mut times: Vec<f64> = trajectory.events.iter().map(|e| e.time).collect();
    times.extend(trajectory.segments.iter().map(|s| s.t_start));
    times.push(t0);
    times.push(t1);
    let steps = ((t1 - t0) / sample_dt).floor() as usize;
    times.extend(
        (0..=steps)
            .map(|k| t0 + k as f64 * sample_dt)
            .filter(|t| *t <= t1),
    );
    times.retain(|t| t.is_finite());
    times.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(times.len());
    for t in times {
        if out.last().is_none_or(|last| t - last > tol) {
            out.push(t);
        }
    }
    out
}

pub fn trajectory_csv(trajectory: &Trajectory, sample_dt: f64) -> String {
    let mut out = String::from("t,s");
    for i in 1..=trajectory.point_count {
        let _ = write!(out, ",R_{i}");
    }
    out.push('\n');
    for t in sample_times(trajectory, sample_dt) {
        let (s, r) = trajectory.state_at(t);
        let _ = write!(out, "{t},{s}");
        for v in r {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn events_csv(trajectory: &Trajectory) -> String {
    let mut out = String::from("t,kind,detail\n");
    for e in &trajectory.events {
        let _ = writeln!(out, "{},{},{}", e.time, e.kind.label(), e.kind.detail());
    }
    out
}

pub fn summary_json(summary: &Summary) -> Result<String, serde_json::Error> {
    let mut out = serde_json::to_string_pretty(summary)?;
    out.push('\n');
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    pub trajectory: PathBuf,
    pub events: PathBuf,
    pub summary: PathBuf,
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `trajectory.csv`, `events.csv` and `summary.json` into the
/// manifest's output directory.
pub fn export(
    trajectory: &Trajectory,
    summary: &Summary,
    manifest: &RunManifest,
) -> Result<ExportedFiles, IoError> {
    manifest.validate()?;
    let dir = &manifest.output_dir;
    fs::create_dir_all(dir).map_err(|source| IoError::File {
        path: dir.clone(),
        source,
    })?;
    let files = ExportedFiles {
        trajectory: dir.join("trajectory.csv"),
        events: dir.join("events.csv"),
        summary: dir.join("summary.json"),
    };
    write_file(
        &files.trajectory,
        &trajectory_csv(trajectory, manifest.sample_dt),
    )?;
    write_file(&files.events, &events_csv(trajectory))?;
    write_file(&files.summary, &summary_json(summary)?)?;
    Ok(files)
}
