//! Oracle checks shared by the per-module test targets and the acceptance
//! harness. Each check returns a one-line summary or a failure message.

#![allow(dead_code)]

pub mod hexplane;
pub mod rasterizer;
pub mod retrieval;
pub mod skinning;

pub type Outcome = Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

/// Fails with `msg` when `err > tol`, otherwise reports the error.
pub fn within(what: &str, err: f64, tol: f64) -> Outcome {
    if err <= tol && err.is_finite() {
        Ok(format!("{what}: max err {err:.2e} <= {tol:.0e}"))
    } else {
        Err(format!("{what}: max err {err:.3e} exceeds {tol:.0e}"))
    }
}

/// Relative error with an absolute floor for near-zero values.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Runs every check, panicking with all failures.
pub fn run_all(checks: &[Check]) {
    let failures: Vec<String> = checks.iter().filter_map(|c| (c.run)().err().map(|e| format!("{}: {e}", c.name))).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
