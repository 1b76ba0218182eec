#![allow(dead_code)]

use std::io::Write;
use std::path::PathBuf;

use pfld::harness::ExperimentConfig;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&config_path(name)).expect("shipped config loads")
}

/// Writes straight to the stderr handle so the line shows even for passing tests.
pub fn report(passed: bool, name: &str, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[acceptance] [{tag}] {name}: {detail}");
}

