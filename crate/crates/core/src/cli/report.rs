use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::Format;
use crate::clt::{bound_formula, sort_records, write_csv, write_json_lines, write_markdown, ExperimentRecord};
use crate::error::{precondition, Result};

fn formula_of(label: &str) -> &'static str {
    bound_formula(label.rsplit('/').next().unwrap_or(label))
}

/// Writes `records` in one format to `path`. Records are sorted first so
/// the output does not depend on scheduling.
pub fn emit_report(records: &[ExperimentRecord], format: Format, path: &Path, timings: bool) -> Result<()> {
    if records.is_empty() {
        return Err(precondition("no records to write"));
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(&sorted, timings, &mut out)?,
        Format::Json => write_json_lines(&sorted, timings, &mut out)?,
        Format::Md => {
            write_markdown(&sorted, timings, &mut out)?;
            let mut labels: Vec<&str> = sorted.iter().map(|r| r.label.as_str()).collect();
            labels.dedup();
            writeln!(out, "\n## Bounds\n")?;
            for l in labels {
                writeln!(out, "- `{l}`: {}", formula_of(l))?;
            }
            let notes: Vec<_> = sorted.iter().filter_map(|r| r.note.as_ref().map(|n| (r, n))).collect();
            if !notes.is_empty() {
                writeln!(out, "\n## Notes\n")?;
                for (r, n) in notes {
                    writeln!(out, "- `{}` (n = {}): {n}", r.label, r.n)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Per-label pass counts.
pub fn summary(records: &[ExperimentRecord]) -> String {
    let mut by_label: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let e = by_label.entry(r.label.as_str()).or_default();
        e.0 += 1;
        if r.pass {
            e.1 += 1;
        }
        if !r.asserted {
            e.2 += 1;
        }
    }
    let mut s = String::new();
    let (mut total, mut passed) = (0, 0);
    for (label, (n, p, info)) in &by_label {
        total += n;
        passed += p;
        let tag = if *info == *n { " (informational)" } else { "" };
        s.push_str(&format!("{label}: {p}/{n} passed{tag}\n"));
    }
    let failed = records.iter().filter(|r| r.is_failure()).count();
    s.push_str(&format!("total: {passed}/{total} passed, {failed} asserted failures\n"));
    s
}

/// `label,n,measured,bound` rows for plotting.
pub fn plot_data(records: &[ExperimentRecord]) -> String {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut s = String::from("label,n,measured,bound\n");
    for r in &sorted {
        s.push_str(&format!("{},{},{:e},{:e}\n", r.label, r.n, r.measured, r.bound));
    }
    s
}

/// Writes every requested report and returns the paths written.
pub fn write_all(
    records: &[ExperimentRecord],
    formats: &[Format],
    dir: &Path,
    name: &str,
    timings: bool,
    plot: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        let path = dir.join(format!("{name}.{}", f.extension()));
        emit_report(records, *f, &path, timings)?;
        written.push(path);
    }
    let path = dir.join(format!("{name}.summary.txt"));
    std::fs::write(&path, summary(records))?;
    written.push(path);
    if plot {
        let path = dir.join(format!("{name}.plot.csv"));
        std::fs::write(&path, plot_data(records))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clt::RecordKind;

    fn sample() -> Vec<ExperimentRecord> {
        vec![
            ExperimentRecord::new("b/w2-rate", RecordKind::Upper, 4, 0.1, 0.2, 0.0),
            ExperimentRecord::new("a/hsi", RecordKind::Upper, 2, 0.3, 0.2, 0.0),
            ExperimentRecord::new("a/rio", RecordKind::Asymptotic, 64, 0.5, 0.6, 0.2),
        ]
    }

    #[test]
    fn csv_has_header_plus_rows_and_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        emit_report(&sample(), Format::Csv, &p, false).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(String::from_utf8_lossy(&first).lines().count(), 4);
        emit_report(&sample(), Format::Csv, &p, false).unwrap();
        assert_eq!(first, std::fs::read(&p).unwrap());
        assert!(emit_report(&[], Format::Csv, &p, false).is_err());
    }

    #[test]
    fn summary_counts() {
        let s = summary(&sample());
        assert!(s.contains("a/hsi: 0/1 passed"));
        assert!(s.contains("1 asserted failures"));
    }
}
