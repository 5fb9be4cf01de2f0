//! Executable versions of the convergence theory: exact identities,
//! per-iteration inequalities and rate regressions.

pub mod checks;
pub mod rate;
pub mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Identity,
    Inequality,
    Rate,
}

/// Outcome of one check.
///
/// * identity: `value` is the residual `lhs - rhs`, pass iff `|value| ≤ tol`;
/// * inequality: `value` is the slack `rhs - lhs`, pass iff `value ≥ -tol`;
/// * rate: `value` is the fitted slope, `rhs` the threshold, pass iff `value ≤ rhs`.
///
/// Non-finite numbers never pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub lhs: f64,
    pub rhs: f64,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckResult {
    pub fn identity(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let value = lhs - rhs;
        Self { name: name.into(), kind: CheckKind::Identity, lhs, rhs, value, tol, pass: value.abs() <= tol }
    }

    /// `lhs ≤ rhs` up to `tol`.
    pub fn inequality(name: impl Into<String>, lhs: f64, rhs: f64, tol: f64) -> Self {
        let value = rhs - lhs;
        let pass = lhs.is_finite() && rhs.is_finite() && value >= -tol;
        Self { name: name.into(), kind: CheckKind::Inequality, lhs, rhs, value, tol, pass }
    }

    pub fn rate(name: impl Into<String>, slope: f64, half_width: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            kind: CheckKind::Rate,
            lhs: slope,
            rhs: threshold,
            value: slope,
            tol: half_width,
            pass: slope.is_finite() && slope <= threshold,
        }
    }
}

/// A named collection of checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Fixed-width text table, one check per line.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<10}  {:>13}  {:>13}  {:>13}  {:>9}  result", "name", "kind", "lhs", "rhs", "value", "tol");
        for c in &self.checks {
            let kind = match c.kind {
                CheckKind::Identity => "identity",
                CheckKind::Inequality => "inequality",
                CheckKind::Rate => "rate",
            };
            let _ = writeln!(
                out,
                "{:<width$}  {:<10}  {:>13.6e}  {:>13.6e}  {:>13.6e}  {:>9.1e}  {}",
                c.name,
                kind,
                c.lhs,
                c.rhs,
                c.value,
                c.tol,
                if c.pass { "pass" } else { "FAIL" }
            );
        }
        out
    }

    /// `(passed, total)`.
    pub fn summary(&self) -> (usize, usize) {
        (self.checks.iter().filter(|c| c.pass).count(), self.checks.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nan_never_passes() {
        assert!(!CheckResult::inequality("x", f64::NAN, 1.0, 1e-10).pass);
        assert!(!CheckResult::inequality("x", 0.0, f64::INFINITY, 1e-10).pass);
        assert!(!CheckResult::identity("x", f64::NAN, 0.0, 1e-10).pass);
        assert!(!CheckResult::rate("x", f64::NAN, 0.0, -0.4).pass);
    }

    #[test]
    fn pass_rules() {
        assert!(CheckResult::identity("x", 1.0, 1.0 + 1e-11, 1e-10).pass);
        assert!(CheckResult::inequality("x", 1.0 + 1e-11, 1.0, 1e-10).pass);
        assert!(!CheckResult::inequality("x", 1.1, 1.0, 1e-10).pass);
        assert!(CheckResult::rate("x", -0.5, 0.1, -0.4).pass);
        let mut r = CheckReport::default();
        r.push(CheckResult::rate("slope", -0.3, 0.1, -0.4));
        assert!(!r.all_pass());
        assert!(r.table().contains("FAIL"));
    }
}
