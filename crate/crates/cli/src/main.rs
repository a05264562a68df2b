//! Batch front-end: load a scenario, precheck it, run it, write the artifacts.

mod manifest;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nsbform::diagnostics::{StabilityReport, Verdict};
use nsbform::scenario::ScenarioConfig;
use nsbform::simulator::{ModeEvent, RunSummary, Simulator};
use nsbform::telemetry::write_csv;
use rayon::prelude::*;
use serde::Serialize;

use manifest::{Manifest, Overrides, RunSpec};

#[derive(Parser)]
#[command(name = "nsbform", version, about = "Formation path following for fleets of underactuated vehicles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, precheck and simulate a scenario.
    Run {
        /// Scenario JSON file.
        config: std::path::PathBuf,
        /// Output directory (one subdirectory per sweep point).
        #[arg(long, default_value = "out")]
        out: std::path::PathBuf,
        /// Simulation mode: full or ideal.
        #[arg(long)]
        mode: Option<String>,
        /// Integration step [s], overrides `sim.dt`.
        #[arg(long)]
        dt: Option<f64>,
        /// Simulated time [s], overrides `sim.duration`.
        #[arg(long)]
        duration: Option<f64>,
        /// Sweep axis `key=v1,v2,...` with a dotted key (e.g. guidance.delta0); repeatable.
        #[arg(long = "sweep")]
        sweeps: Vec<String>,
        /// Write the stability report only.
        #[arg(long)]
        check_only: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ok = 0,
    Config = 1,
    Runtime = 2,
    Precheck = 3,
}

impl Status {
    /// Across sweep points the most severe status wins.
    fn severity(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Precheck => 1,
            Status::Runtime => 2,
            Status::Config => 3,
        }
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    summary: &'a RunSummary,
    events: &'a [ModeEvent],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| format!("{}: {e}", path.display()))?;
    fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn execute(spec: &RunSpec, check_only: bool) -> Status {
    let tag = if spec.label.is_empty() { String::new() } else { format!("[{}] ", spec.label) };
    let cfg: &ScenarioConfig = &spec.config;
    let derived = match cfg.prepare() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("{tag}{e}");
            return Status::Config;
        }
    };
    if let Err(e) = fs::create_dir_all(&spec.dir) {
        eprintln!("{tag}cannot create {}: {e}", spec.dir.display());
        return Status::Config;
    }
    let io = |r: Result<(), String>| -> Option<Status> {
        r.err().map(|e| {
            eprintln!("{tag}write failed: {e}");
            Status::Config
        })
    };
    if let Some(s) = io(write_json(&spec.dir.join("config.json"), cfg)) {
        return s;
    }

    let mut report = match StabilityReport::precheck(cfg, &derived) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{tag}precheck failed to evaluate: {e}");
            return Status::Runtime;
        }
    };
    let b = &report.bounds;
    eprintln!(
        "{tag}precheck: {:?} (Y_min {:.4}, X_max {:.4}, a_NSB {:.4}, a_v {:.4}, k_a {:.4})",
        b.verdict, b.y_min, b.x_max, b.a_nsb, b.a_v, b.k_a
    );
    for w in &report.warnings {
        eprintln!("{tag}warning: {w}");
    }
    let precheck = if b.verdict == Verdict::Fail { Status::Precheck } else { Status::Ok };
    if check_only {
        return io(write_json(&spec.dir.join("stability.json"), &report)).unwrap_or(precheck);
    }

    let sim = match Simulator::new(cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{tag}{e}");
            return Status::Config;
        }
    };
    let out = match sim.run() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{tag}run aborted: {e}");
            let _ = write_json(&spec.dir.join("stability.json"), &report);
            return Status::Runtime;
        }
    };
    if let Err(e) = report.attach_run(cfg, &derived, &out) {
        eprintln!("{tag}post-run audit failed: {e}");
        return Status::Runtime;
    }
    let status = if report.consistent { precheck } else { Status::Runtime };
    let telemetry = fs::File::create(spec.dir.join("telemetry.csv"))
        .map_err(|e| e.to_string())
        .and_then(|f| write_csv(std::io::BufWriter::new(f), &out.records).map_err(|e| e.to_string()));
    for r in [
        telemetry,
        write_json(&spec.dir.join("summary.json"), &SummaryFile { summary: &out.summary, events: &out.events }),
        write_json(&spec.dir.join("stability.json"), &report),
    ] {
        if let Some(s) = io(r) {
            return s;
        }
    }
    let s = &out.summary;
    eprintln!(
        "{tag}done: {} steps, min distance {:.3?} m, max sway/heave {:.3} m/s, {} mode switches -> {}",
        s.steps,
        s.min_inter_vehicle_distance,
        s.max_sway_heave,
        s.mode_switches,
        spec.dir.display()
    );
    if !report.consistent {
        eprintln!("{tag}error: the run contradicts the passing boundedness verdict");
    }
    status
}

fn main() -> ExitCode {
    let Command::Run { config, out, mode, dt, duration, sweeps, check_only } = Cli::parse().command;
    let overrides = Overrides { mode, dt, duration };
    let manifest = match Manifest::build(&config, &out, &sweeps, &overrides) {
        Ok(m) => m,
        Err(errs) => {
            for e in errs {
                eprintln!("error: {e}");
            }
            return ExitCode::from(Status::Config as u8);
        }
    };
    let worst = manifest.runs.par_iter().map(|r| execute(r, check_only)).max_by_key(|s| s.severity()).unwrap_or(Status::Ok);
    ExitCode::from(worst as u8)
}
