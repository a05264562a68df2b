//! Run manifest: configuration, output layout, overrides and sweep axes.

use std::path::{Path, PathBuf};

use nsbform::scenario::{ScenarioConfig, SimMode};
use serde_json::Value;

/// Command-line overrides applied after the sweep values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<String>,
    pub dt: Option<f64>,
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pointer: String,
    /// Raw text of each value, used in directory names.
    pub raw: Vec<String>,
    values: Vec<Value>,
}

/// One point of the sweep with its validated configuration.
#[derive(Debug, Clone)]
pub struct RunSpec {
    /// `key=value` pairs joined by commas; empty without a sweep.
    pub label: String,
    pub dir: PathBuf,
    pub config: ScenarioConfig,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub runs: Vec<RunSpec>,
}

fn pointer(key: &str) -> String {
    key.split('.').fold(String::new(), |acc, seg| format!("{acc}/{seg}"))
}

/// Parses `key=v1,v2,...` against the fully populated configuration tree.
pub fn parse_axis(spec: &str, tree: &Value) -> Result<SweepAxis, String> {
    let (key, values) = spec.split_once('=').ok_or_else(|| format!("sweep `{spec}`: expected key=v1,v2,..."))?;
    let key = key.trim();
    let pointer = pointer(key);
    if key.is_empty() || tree.pointer(&pointer).is_none() {
        return Err(format!("sweep `{spec}`: `{key}` is not a configuration key"));
    }
    let raw: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if raw.is_empty() {
        return Err(format!("sweep `{spec}`: no values"));
    }
    let values = raw.iter().map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()))).collect();
    Ok(SweepAxis { key: key.to_string(), pointer, raw, values })
}

/// Every combination of one value per axis, first axis varying slowest.
fn product(axes: &[SweepAxis]) -> Vec<Vec<usize>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.into_iter().flat_map(|p| (0..axis.values.len()).map(move |k| [p.clone(), vec![k]].concat())).collect()
    })
}

impl Manifest {
    /// Reads the scenario and expands the sweep; every error is reported.
    pub fn build(config: &Path, out: &Path, sweeps: &[String], ov: &Overrides) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(config).map_err(|e| vec![format!("{}: {e}", config.display())])?;
        let base = ScenarioConfig::from_json(&text).map_err(|e| match e {
            nsbform::Error::Config(m) => m,
            other => vec![other.to_string()],
        })?;
        let tree: Value = serde_json::from_str(&base.to_json()).expect("configuration serializes to JSON");

        let mut errs = Vec::new();
        let axes: Vec<SweepAxis> = sweeps.iter().filter_map(|s| parse_axis(s, &tree).map_err(|e| errs.push(e)).ok()).collect();
        let mode = match ov.mode.as_deref().map(str::parse::<SimMode>).transpose() {
            Ok(m) => m,
            Err(e) => {
                errs.push(format!("--mode: {e}"));
                None
            }
        };
        if !errs.is_empty() {
            return Err(errs);
        }

        let mut runs = Vec::new();
        for point in product(&axes) {
            let mut t = tree.clone();
            let mut label = Vec::new();
            for (axis, &k) in axes.iter().zip(&point) {
                *t.pointer_mut(&axis.pointer).expect("axis key checked") = axis.values[k].clone();
                label.push(format!("{}={}", axis.key, axis.raw[k]));
            }
            let label = label.join(",");
            let cfg = ScenarioConfig::from_json(&t.to_string()).map(|mut cfg| {
                if let Some(m) = mode {
                    cfg.sim.mode = m;
                }
                if let Some(dt) = ov.dt {
                    cfg.sim.dt = dt;
                }
                if let Some(d) = ov.duration {
                    cfg.sim.duration = d;
                }
                cfg
            });
            let prefix = if label.is_empty() { String::new() } else { format!("[{label}] ") };
            match cfg {
                Err(nsbform::Error::Config(m)) => errs.extend(m.into_iter().map(|m| format!("{prefix}{m}"))),
                Err(e) => errs.push(format!("{prefix}{e}")),
                Ok(cfg) => {
                    errs.extend(cfg.validate().into_iter().map(|m| format!("{prefix}{m}")));
                    let dir = if label.is_empty() { out.to_path_buf() } else { out.join(&label) };
                    runs.push(RunSpec { label, dir, config: cfg });
                }
            }
        }
        if errs.is_empty() {
            Ok(Self { runs })
        } else {
            Err(errs)
        }
    }
}
