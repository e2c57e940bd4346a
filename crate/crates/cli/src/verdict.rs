//! The versioned verdict document written at the end of every run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub status: Status,
    pub metric: Option<f64>,
    pub tolerance: Option<f64>,
    /// Equation label the check verifies.
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub schema: u32,
    pub command: String,
    pub passed: bool,
    pub checks: BTreeMap<String, Check>,
}

impl Verdict {
    pub fn new(command: &str) -> Self {
        Self { schema: SCHEMA_VERSION, command: command.to_string(), passed: true, checks: BTreeMap::new() }
    }

    fn insert(&mut self, name: &str, check: Check) {
        self.passed &= check.status != Status::Fail;
        self.checks.insert(name.to_string(), check);
    }

    /// Passes when `metric ≤ tolerance`; NaN metrics fail.
    pub fn measure(&mut self, name: &str, label: &str, metric: f64, tolerance: f64) -> Status {
        let status = if metric <= tolerance { Status::Pass } else { Status::Fail };
        self.insert(
            name,
            Check { status, metric: Some(metric), tolerance: Some(tolerance), label: label.into(), note: None },
        );
        status
    }

    /// Attaches a note to an existing check.
    pub fn annotate(&mut self, name: &str, note: impl Into<String>) {
        if let Some(c) = self.checks.get_mut(name) {
            c.note = Some(note.into());
        }
    }

    /// Forces an existing check to fail with `note`.
    pub fn reject(&mut self, name: &str, note: impl Into<String>) {
        if let Some(c) = self.checks.get_mut(name) {
            c.status = Status::Fail;
            c.note = Some(note.into());
        }
        self.passed = false;
    }

    pub fn fail(&mut self, name: &str, label: &str, note: impl Into<String>) {
        let check = Check { status: Status::Fail, metric: None, tolerance: None, label: label.into(), note: Some(note.into()) };
        self.insert(name, check);
    }

    pub fn skip(&mut self, name: &str, label: &str, note: impl Into<String>) {
        let check = Check { status: Status::Skipped, metric: None, tolerance: None, label: label.into(), note: Some(note.into()) };
        self.insert(name, check);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("verdict serializes");
        s.push('\n');
        s
    }

    /// Human-readable PASS/FAIL table keyed by equation label.
    pub fn table(&self) -> String {
        let mut rows: Vec<(&String, &Check)> = self.checks.iter().collect();
        rows.sort_by(|a, b| a.1.label.cmp(&b.1.label).then(a.0.cmp(b.0)));
        let mut out = String::new();
        for (name, c) in rows {
            let status = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIP",
            };
            let _ = write!(out, "{status:<5}{:<19}{name:<26}", c.label);
            match (c.metric, c.tolerance) {
                (Some(m), Some(t)) => {
                    let _ = write!(out, "{m:>11.3e} <= {t:.3e}");
                }
                _ => out.push_str(&" ".repeat(11)),
            }
            if let Some(note) = &c.note {
                let _ = write!(out, "  ({note})");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "{}", if self.passed { "all checks passed" } else { "some checks FAILED" });
        out
    }
}
