use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::error::{precondition, Result};

/// Absolute slack added to relative tolerances so that bounds equal to zero
/// are not failed by rounding.
pub const ABS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    /// `measured ≤ bound`.
    Upper,
    /// `measured ≥ bound`.
    Lower,
    /// `measured ≈ bound` within the tolerance.
    Approx,
    /// Like `Approx` but only reported, never asserted.
    Asymptotic,
}

/// One measured quantity compared with a theoretical value.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRecord {
    pub label: String,
    pub n: usize,
    pub m: Option<usize>,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    pub tolerance: f64,
    pub runtime_ms: f64,
    pub kind: RecordKind,
    pub asserted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ExperimentRecord {
    pub fn new(label: impl Into<String>, kind: RecordKind, n: usize, measured: f64, bound: f64, tolerance: f64) -> Self {
        let pass = Self::check(kind, measured, bound, tolerance);
        Self {
            label: label.into(),
            n,
            m: None,
            measured,
            bound,
            pass,
            tolerance,
            runtime_ms: 0.0,
            kind,
            asserted: kind != RecordKind::Asymptotic,
            note: None,
        }
    }

    fn check(kind: RecordKind, measured: f64, bound: f64, tol: f64) -> bool {
        if !measured.is_finite() || bound.is_nan() {
            return false;
        }
        match kind {
            RecordKind::Upper => measured <= bound + tol * bound.abs() + ABS_SLACK,
            RecordKind::Lower => measured >= bound - tol * bound.abs() - ABS_SLACK,
            RecordKind::Approx | RecordKind::Asymptotic => (measured - bound).abs() <= tol * bound.abs() + ABS_SLACK,
        }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = Some(m);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn with_runtime(mut self, ms: f64) -> Self {
        self.runtime_ms = ms;
        self
    }

    /// Reported without affecting the exit status.
    pub fn informational(mut self) -> Self {
        self.asserted = false;
        self
    }

    /// Failed and asserted.
    pub fn is_failure(&self) -> bool {
        self.asserted && !self.pass
    }
}

/// Deterministic order: label, then n, then m.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    records.sort_by(|a, b| {
        a.label.cmp(&b.label).then(a.n.cmp(&b.n)).then_with(|| match (a.m, b.m) {
            (None, None) => Ordering::Equal,
            (None, Some(_)) => Ordering::Less,
            (Some(_), None) => Ordering::Greater,
            (Some(x), Some(y)) => x.cmp(&y),
        })
    });
}

pub const CSV_HEADER: &str = "label,n,m,measured,bound,pass,tolerance,runtime_ms";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(records: &[ExperimentRecord], timings: bool, mut out: impl Write) -> Result<()> {
    if records.is_empty() {
        return Err(precondition("no records to write"));
    }
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{},{:e},{}",
            csv_field(&r.label),
            r.n,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            r.measured,
            r.bound,
            r.pass,
            r.tolerance,
            if timings { format!("{:.3}", r.runtime_ms) } else { "0".into() }
        )?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_json_lines(records: &[ExperimentRecord], timings: bool, mut out: impl Write) -> Result<()> {
    if records.is_empty() {
        return Err(precondition("no records to write"));
    }
    for r in records {
        let mut r = r.clone();
        if !timings {
            r.runtime_ms = 0.0;
        }
        writeln!(out, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

pub fn write_markdown(records: &[ExperimentRecord], timings: bool, mut out: impl Write) -> Result<()> {
    if records.is_empty() {
        return Err(precondition("no records to write"));
    }
    writeln!(out, "| label | n | m | measured | bound | pass | tolerance | runtime_ms |")?;
    writeln!(out, "|---|---|---|---|---|---|---|---|")?;
    for r in records {
        writeln!(
            out,
            "| {} | {} | {} | {:.6e} | {:.6e} | {} | {:e} | {} |",
            r.label.replace('|', "\\|"),
            r.n,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            r.measured,
            r.bound,
            if r.pass { "yes" } else { "no" },
            r.tolerance,
            if timings { format!("{:.3}", r.runtime_ms) } else { "0".into() }
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pass_rules() {
        assert!(ExperimentRecord::new("a", RecordKind::Upper, 1, 1.0, 1.0, 0.0).pass);
        assert!(!ExperimentRecord::new("a", RecordKind::Upper, 1, 1.1, 1.0, 0.05).pass);
        assert!(ExperimentRecord::new("a", RecordKind::Lower, 1, 1.1, 1.0, 0.0).pass);
        assert!(ExperimentRecord::new("a", RecordKind::Upper, 1, 1e-12, 0.0, 0.0).pass);
        let r = ExperimentRecord::new("a", RecordKind::Asymptotic, 1, 2.0, 1.0, 0.2);
        assert!(!r.pass && !r.is_failure());
        assert!(!ExperimentRecord::new("a", RecordKind::Upper, 1, f64::NAN, 1.0, 0.0).pass);
    }

    #[test]
    fn sorted_csv() {
        let mut v = vec![
            ExperimentRecord::new("b", RecordKind::Upper, 2, 1.0, 2.0, 0.0),
            ExperimentRecord::new("a", RecordKind::Upper, 4, 1.0, 2.0, 0.0).with_m(2),
            ExperimentRecord::new("a", RecordKind::Upper, 4, 1.0, 2.0, 0.0),
        ];
        sort_records(&mut v);
        let mut buf = Vec::new();
        write_csv(&v, false, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("a,4,,"));
        assert!(lines[2].starts_with("a,4,2,"));
        assert!(lines[3].starts_with("b,2,"));
        assert!(write_csv(&[], false, Vec::new()).is_err());
    }
}
