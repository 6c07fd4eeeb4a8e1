use std::path::Path;

use qatten_core::theory::{igm_suite, run_suite, CheckRecord};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Serialize)]
pub struct ReportEntry {
    pub name: String,
    pub composition: usize,
    pub inputs_digest: String,
    pub inputs: Value,
    pub measured: Value,
    pub passed: Option<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationReport {
    pub suite_seed: u64,
    pub passed: bool,
    pub checks: Vec<ReportEntry>,
}

impl VerificationReport {
    /// `(name, passed, asserted)` counts per check name, in first-seen order.
    pub fn summary(&self) -> Vec<(String, usize, usize)> {
        let mut out: Vec<(String, usize, usize)> = Vec::new();
        for c in &self.checks {
            let pos = match out.iter().position(|(n, _, _)| *n == c.name) {
                Some(p) => p,
                None => {
                    out.push((c.name.clone(), 0, 0));
                    out.len() - 1
                }
            };
            if let Some(p) = c.passed {
                out[pos].2 += 1;
                out[pos].1 += usize::from(p);
            }
        }
        out
    }
}

fn entry(c: CheckRecord) -> ReportEntry {
    let canonical = serde_json::to_string(&c.inputs).expect("inputs serialize");
    ReportEntry {
        inputs_digest: hex::encode(Sha256::digest(canonical.as_bytes())),
        name: c.name,
        composition: c.composition,
        inputs: c.inputs,
        measured: c.measured,
        passed: c.passed,
    }
}

/// Decomposition checks on the seeded synthetic suite plus the IGM checks.
pub fn verify_theory(seed: u64) -> Result<VerificationReport> {
    let suite = run_suite(seed)?;
    let mut checks: Vec<ReportEntry> = suite.checks.into_iter().map(entry).collect();
    checks.extend(igm_suite(seed)?.into_iter().map(entry));
    let passed = checks.iter().all(|c| c.passed != Some(false));
    Ok(VerificationReport {
        suite_seed: seed,
        passed,
        checks,
    })
}

pub fn write_report(path: &Path, report: &VerificationReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Failed(e.to_string()))?;
    std::fs::write(path, text).map_err(CliError::io(path))
}
