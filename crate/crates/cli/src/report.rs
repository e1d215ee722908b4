//! Aggregation of `result.json` files into CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

/// The fields of a result file that reports use.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub transform: String,
    pub method: String,
    pub seed: u64,
    pub marglik_total: f64,
    pub test_acc: f64,
    pub test_nll: f64,
}

/// Mean and standard error `σ/√n` (sample deviation) of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub dataset: String,
    pub transform: String,
    pub method: String,
    pub runs: usize,
    pub marglik: (f64, f64),
    pub test_acc: (f64, f64),
    pub test_nll: (f64, f64),
}

pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "result.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads every `result.json` below `dir`; malformed files are reported in
/// the second list and skipped.
pub fn load_results(dir: &Path) -> Result<(Vec<ResultRow>, Vec<(PathBuf, String)>), CliError> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match std::fs::read(&f).map_err(|e| e.to_string()).and_then(|b| serde_json::from_slice::<ResultRow>(&b).map_err(|e| e.to_string())) {
            Ok(r) => rows.push(r),
            Err(e) => skipped.push((f, e)),
        }
    }
    rows.sort_by(|a, b| {
        (&a.dataset, &a.transform, &a.method, a.seed)
            .cmp(&(&b.dataset, &b.transform, &b.method, b.seed))
            .then(a.marglik_total.total_cmp(&b.marglik_total))
    });
    Ok((rows, skipped))
}

pub fn summarise(rows: &[ResultRow]) -> Vec<GroupSummary> {
    let mut groups: BTreeMap<(&str, &str, &str), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.dataset, &r.transform, &r.method)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((d, t, m), rs)| {
            let col = |f: fn(&ResultRow) -> f64| mean_se(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            GroupSummary {
                dataset: d.into(),
                transform: t.into(),
                method: m.into(),
                runs: rs.len(),
                marglik: col(|r| r.marglik_total),
                test_acc: col(|r| r.test_acc),
                test_nll: col(|r| r.test_nll),
            }
        })
        .collect()
}

/// Per-run rows followed by one `mean` and one `se` row per group.
pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("dataset,transform,method,seed,marglik_total,test_acc,test_nll\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.dataset, r.transform, r.method, r.seed, r.marglik_total, r.test_acc, r.test_nll);
    }
    for g in summarise(rows) {
        let _ = writeln!(s, "{},{},{},mean,{},{},{}", g.dataset, g.transform, g.method, g.marglik.0, g.test_acc.0, g.test_nll.0);
        let _ = writeln!(s, "{},{},{},se,{},{},{}", g.dataset, g.transform, g.method, g.marglik.1, g.test_acc.1, g.test_nll.1);
    }
    s
}
