//! Shared setup for the benchmarks.

use std::path::PathBuf;

use nsbform::scenario::ScenarioConfig;

/// Loads a shipped fixture by file name.
pub fn fixture(name: &str) -> ScenarioConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    let text = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    ScenarioConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}
