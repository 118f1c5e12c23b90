//! Cross-run comparison tables.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::Method;

use super::{EvalSummary, EVAL_DIR, SUMMARY_FILE};

/// Preferred column order; other metrics follow alphabetically.
const ORDER: [&str; 10] = [
    "e0",
    "e1",
    "e2",
    "top1",
    "top5",
    "nrmse",
    "retrieval_precision",
    "gradnorm",
    "landscape_center",
    "landscape_roughness",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub seeds: usize,
    /// Mean and sample standard deviation per column; `None` when no run of
    /// this method reported the metric.
    pub values: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

fn mean_spread(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let spread = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, spread)
}

pub fn read_summary(run_dir: &Path) -> Result<EvalSummary> {
    let path = run_dir.join(EVAL_DIR).join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
}

/// Groups evaluated runs by method. Runs with differing metric sets are
/// reported over the union of columns, with a warning.
pub fn build_report(summaries: &[EvalSummary]) -> Report {
    let mut warnings = Vec::new();
    let sets: Vec<BTreeSet<&str>> = summaries
        .iter()
        .map(|s| s.metrics.keys().map(String::as_str).collect())
        .collect();
    let union: BTreeSet<&str> = sets.iter().flatten().copied().collect();
    if sets.iter().any(|s| *s != union) {
        let partial: Vec<&str> = summaries
            .iter()
            .zip(&sets)
            .filter(|(_, s)| **s != union)
            .map(|(r, _)| r.run.as_str())
            .collect();
        warnings.push(format!(
            "column mismatch: runs {} lack some metrics; reporting the union of columns",
            partial.join(", ")
        ));
    }
    let mut columns: Vec<String> = ORDER.iter().filter(|c| union.contains(*c)).map(|c| c.to_string()).collect();
    columns.extend(union.iter().filter(|c| !ORDER.contains(c)).map(|c| c.to_string()));

    let mut groups: Vec<(Method, Vec<&EvalSummary>)> = Vec::new();
    for s in summaries {
        match groups.iter_mut().find(|(m, _)| *m == s.method) {
            Some((_, g)) => g.push(s),
            None => groups.push((s.method, vec![s])),
        }
    }
    let rows = groups
        .into_iter()
        .map(|(method, runs)| ReportRow {
            method,
            seeds: runs.iter().map(|r| r.seed).collect::<BTreeSet<_>>().len(),
            values: columns
                .iter()
                .map(|c| {
                    let v: Vec<f64> = runs.iter().filter_map(|r| r.metrics.get(c).copied()).collect();
                    (!v.is_empty()).then(|| mean_spread(&v))
                })
                .collect(),
        })
        .collect();
    Report { columns, rows, warnings }
}

/// Reads `eval/summary.json` of every run directory and builds the table.
pub fn cmd_report(run_dirs: &[impl AsRef<Path>]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let summaries = run_dirs
        .iter()
        .map(|d| read_summary(d.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&summaries);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(report)
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "seeds".to_string()];
        for c in &self.columns {
            header.push(format!("{c}_mean"));
            header.push(format!("{c}_spread"));
        }
        w.write_record(&header).expect("in-memory write");
        for row in &self.rows {
            let mut rec = vec![row.method.to_string(), row.seeds.to_string()];
            for v in &row.values {
                match v {
                    Some((m, s)) => {
                        rec.push(m.to_string());
                        rec.push(s.to_string());
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flushed")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["method".to_string(), "seeds".to_string()];
        header.extend(self.columns.iter().cloned());
        table.push(header);
        for row in &self.rows {
            let mut line = vec![row.method.to_string(), row.seeds.to_string()];
            line.extend(row.values.iter().map(|v| match v {
                Some((m, s)) => format!("{m:.4} ± {s:.4}"),
                None => String::new(),
            }));
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &table {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn summary(run: &str, method: Method, seed: u64, metrics: &[(&str, f64)]) -> EvalSummary {
        EvalSummary {
            run: run.into(),
            method,
            seed,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn single_run_gives_one_row() {
        let r = build_report(&[summary("r", Method::FewMax, 0, &[("e1", 1.5), ("top1", 40.0)])]);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.columns, ["e1", "top1"]);
        assert_eq!(r.rows[0].values[0], Some((1.5, 0.0)));
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn seeds_aggregate_into_mean_and_spread() {
        let runs: Vec<EvalSummary> = (0..5)
            .map(|s| summary(&format!("r{s}"), Method::Finetune, s, &[("top1", 10.0 * s as f64)]))
            .collect();
        let r = build_report(&runs);
        assert_eq!(r.rows[0].seeds, 5);
        let (m, s) = r.rows[0].values[0].unwrap();
        assert_eq!(m, 20.0);
        assert!((s - 250f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mixed_evaluations_use_union_with_warning() {
        let r = build_report(&[
            summary("cls", Method::FewMax, 0, &[("top1", 50.0), ("e1", 1.0)]),
            summary("mri", Method::Baseline, 0, &[("nrmse", 0.3)]),
        ]);
        assert_eq!(r.columns, ["e1", "top1", "nrmse"]);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.rows[1].values[0], None);
        let csv = r.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("baseline,1,,,,,0.3,0"));
        assert!(r.to_text().contains("few_max"));
    }
}
