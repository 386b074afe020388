//! Bundled regression scenarios: run each shipped scenario and compare
//! its metrics against a frozen expectation file.
//!
//! A bundle directory holds `*.toml` scenarios plus `expected/<name>.toml`
//! expectation files. Expectations pin the deterministic metrics only
//! (never wall-clock solver times) with per-metric absolute tolerances.
//! They are regenerated exclusively through [`bless`]; verification never
//! rewrites anything.

use crate::harness::{self, RunMetrics};
use crate::scenario::{ControllerKind, Scenario, ScenarioError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("cannot access bundle directory: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario {path}: {source}")]
    Scenario {
        path: String,
        #[source]
        source: ScenarioError,
    },
    #[error("missing expectation file {0} (generate it with --bless)")]
    MissingExpected(PathBuf),
    #[error("bad expectation file {path}: {detail}")]
    BadExpected { path: String, detail: String },
    #[error("harness failure in {name}: {detail}")]
    Harness { name: String, detail: String },
}

/// One shipped scenario with its expectation file.
#[derive(Debug, Clone)]
pub struct BundledScenario {
    pub name: String,
    pub note: String,
    pub scenario_path: PathBuf,
    pub expected_path: PathBuf,
}

/// Enumerate the bundle in deterministic (sorted) order.
pub fn discover(dir: &Path) -> Result<Vec<BundledScenario>, BundleError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let scenario = Scenario::load(&path).map_err(|source| BundleError::Scenario {
            path: path.display().to_string(),
            source,
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(BundledScenario {
            name: scenario.name.clone(),
            note: scenario.note.clone(),
            scenario_path: path,
            expected_path: dir.join("expected").join(format!("{stem}.toml")),
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ExpectedFile {
    scenario: String,
    controller: String,
    #[serde(default)]
    check: Vec<Check>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Check {
    metric: String,
    value: f64,
    tol: f64,
}

/// Authored tolerance classes for blessed expectations. Positional
/// statistics get a floor of 2 cm, disturbance errors 0.05 m/s^2, times
/// generous fractions; boolean outcomes must match exactly.
fn default_tolerance(metric: &str, value: f64) -> f64 {
    let rel = 0.25 * value.abs();
    match metric {
        "mission_completed" | "mission_aborted" => 0.0,
        "settling_time_s" => rel.max(0.5),
        "attach_time_s" | "delivery_time_s" | "done_time_s" => (0.10 * value.abs()).max(1.0),
        m if m.starts_with("d_err") => rel.max(0.05),
        _ => rel.max(0.02),
    }
}

/// Result of one metric comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub metric: String,
    pub expected: f64,
    pub tol: f64,
    pub actual: Option<f64>,
    pub pass: bool,
}

/// Verification outcome of one bundled scenario.
#[derive(Debug)]
pub struct ScenarioOutcome {
    pub name: String,
    pub controller: ControllerKind,
    pub fault: Option<String>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Debug)]
pub struct BundleReport {
    pub outcomes: Vec<ScenarioOutcome>,
}

impl BundleReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    /// Plain-text report: one line per scenario, failing metrics listed.
    pub fn text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        for o in &self.outcomes {
            let status = if o.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status} {} [{}]", o.name, o.controller.as_str());
            if let Some(f) = &o.fault {
                let _ = writeln!(out, "     fault: {f}");
            }
            for c in o.checks.iter().filter(|c| !c.pass) {
                match c.actual {
                    Some(a) => {
                        let _ = writeln!(
                            out,
                            "     {}: got {a:.6}, expected {:.6} +/- {:.6}",
                            c.metric, c.expected, c.tol
                        );
                    }
                    None => {
                        let _ = writeln!(out, "     {}: metric absent from run", c.metric);
                    }
                }
            }
        }
        let _ = writeln!(
            out,
            "{}/{} scenarios passed",
            self.outcomes.iter().filter(|o| o.passed).count(),
            self.outcomes.len()
        );
        out
    }
}

fn run_bundled(
    item: &BundledScenario,
) -> Result<(Scenario, ControllerKind, Option<RunMetrics>, Option<String>), BundleError> {
    let scenario = Scenario::load(&item.scenario_path).map_err(|source| BundleError::Scenario {
        path: item.scenario_path.display().to_string(),
        source,
    })?;
    let controller = scenario.default_controller;
    let out = harness::run(&scenario, controller).map_err(|e| BundleError::Harness {
        name: item.name.clone(),
        detail: e.to_string(),
    })?;
    Ok((scenario, controller, out.metrics, out.fault))
}

/// Run every bundled scenario and compare against its expectation file.
pub fn verify_bundle(dir: &Path) -> Result<BundleReport, BundleError> {
    let items = discover(dir)?;
    let mut outcomes = Vec::with_capacity(items.len());
    for item in &items {
        if !item.expected_path.is_file() {
            return Err(BundleError::MissingExpected(item.expected_path.clone()));
        }
        let text = std::fs::read_to_string(&item.expected_path)?;
        let expected: ExpectedFile =
            toml::from_str(&text).map_err(|e| BundleError::BadExpected {
                path: item.expected_path.display().to_string(),
                detail: e.to_string(),
            })?;
        let controller =
            ControllerKind::parse(&expected.controller).map_err(|e| BundleError::BadExpected {
                path: item.expected_path.display().to_string(),
                detail: e.to_string(),
            })?;

        let scenario =
            Scenario::load(&item.scenario_path).map_err(|source| BundleError::Scenario {
                path: item.scenario_path.display().to_string(),
                source,
            })?;
        let run = harness::run(&scenario, controller).map_err(|e| BundleError::Harness {
            name: item.name.clone(),
            detail: e.to_string(),
        })?;

        let actual: Vec<(String, f64)> = run
            .metrics
            .as_ref()
            .map(|m| m.named_values())
            .unwrap_or_default();
        let mut checks = Vec::with_capacity(expected.check.len());
        for c in &expected.check {
            let actual_v = actual.iter().find(|(n, _)| *n == c.metric).map(|(_, v)| *v);
            let pass = matches!(actual_v, Some(a) if (a - c.value).abs() <= c.tol);
            checks.push(CheckResult {
                metric: c.metric.clone(),
                expected: c.value,
                tol: c.tol,
                actual: actual_v,
                pass,
            });
        }
        let passed = run.fault.is_none() && checks.iter().all(|c| c.pass);
        outcomes.push(ScenarioOutcome {
            name: item.name.clone(),
            controller,
            fault: run.fault,
            checks,
            passed,
        });
    }
    Ok(BundleReport { outcomes })
}

/// Regenerate every expectation file from a fresh run. The only
/// sanctioned way to change expectations.
pub fn bless(dir: &Path) -> Result<Vec<PathBuf>, BundleError> {
    let items = discover(dir)?;
    let expected_dir = dir.join("expected");
    std::fs::create_dir_all(&expected_dir)?;
    let mut written = Vec::with_capacity(items.len());
    for item in &items {
        let (scenario, controller, metrics, fault) = run_bundled(item)?;
        if let Some(f) = fault {
            return Err(BundleError::Harness {
                name: item.name.clone(),
                detail: format!("refusing to bless a faulted run: {f}"),
            });
        }
        let metrics = metrics.ok_or_else(|| BundleError::Harness {
            name: item.name.clone(),
            detail: "run produced no metrics".into(),
        })?;
        let file = ExpectedFile {
            scenario: scenario.name.clone(),
            controller: controller.as_str().into(),
            check: metrics
                .named_values()
                .into_iter()
                .map(|(metric, value)| Check {
                    tol: default_tolerance(&metric, value),
                    metric,
                    value,
                })
                .collect(),
        };
        let text = toml::to_string(&file).map_err(|e| BundleError::BadExpected {
            path: item.expected_path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(&item.expected_path, text)?;
        written.push(item.expected_path.clone());
    }
    Ok(written)
}
