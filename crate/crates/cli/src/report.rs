//! Comparison tables from the CSVs the other commands write.
//!
//! Condition reports (attack, sparsify) become one row per condition with a
//! value and std column per input file. Merge score tables become one row
//! per method, protection and k with the best γ, which is both the sweep
//! curve over k and, by taking the best row, the headline comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stabfi::harness::CSV_HEADER;

use crate::args::ReportArgs;
use crate::manifest::Run;
use crate::{usage, CliResult};

const MERGE_HEADER: [&str; 7] = [
    "method",
    "protection",
    "gamma",
    "k",
    "acc_a",
    "acc_b",
    "mean",
];

enum Table {
    Conditions(Vec<(String, String, String, String)>),
    Merge(Vec<Vec<String>>),
}

fn read(path: &Path) -> CliResult<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
            usage(format!("missing input {}", path.display()))
        }
        _ => e.into(),
    })?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header == CSV_HEADER {
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                rec[2].to_string(),
                rec[3].to_string(),
            ));
        }
        Ok(Table::Conditions(rows))
    } else if header == MERGE_HEADER {
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect::<CliResult<_>>()?;
        Ok(Table::Merge(rows))
    } else {
        Err(usage(format!(
            "{} is neither a condition report nor a merge table",
            path.display()
        )))
    }
}

fn label(path: &Path, all: &[PathBuf]) -> String {
    let stem = path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    let clash = all
        .iter()
        .filter(|p| p.file_stem() == path.file_stem())
        .count()
        > 1;
    if clash {
        path.display().to_string()
    } else {
        stem
    }
}

fn number(s: &str) -> CliResult<f64> {
    s.parse()
        .map_err(|_| usage(format!("'{s}' is not a number")))
}

pub(crate) fn run(a: &ReportArgs, run: &mut Run) -> CliResult<PathBuf> {
    let mut conditions = Vec::new();
    let mut merges = Vec::new();
    for p in &a.inputs {
        run.input(p)?;
        match read(p)? {
            Table::Conditions(rows) => conditions.push((label(p, &a.inputs), rows)),
            Table::Merge(rows) => merges.push((label(p, &a.inputs), rows)),
        }
    }
    if !conditions.is_empty() && !merges.is_empty() {
        return Err(usage("cannot mix condition reports and merge tables"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    if merges.is_empty() {
        let mut order: Vec<(String, String)> = Vec::new();
        let mut cells: BTreeMap<(String, String, usize), (String, String)> = BTreeMap::new();
        for (i, (_, rows)) in conditions.iter().enumerate() {
            for (cond, metric, value, std) in rows {
                let key = (cond.clone(), metric.clone());
                if !order.contains(&key) {
                    order.push(key);
                }
                cells.insert(
                    (cond.clone(), metric.clone(), i),
                    (value.clone(), std.clone()),
                );
            }
        }
        let mut header = vec!["condition".to_string(), "metric".to_string()];
        for (name, _) in &conditions {
            header.push(name.clone());
            header.push(format!("{name}_std"));
        }
        w.write_record(&header)?;
        for (cond, metric) in &order {
            let mut rec = vec![cond.clone(), metric.clone()];
            for i in 0..conditions.len() {
                match cells.get(&(cond.clone(), metric.clone(), i)) {
                    Some((v, s)) => rec.extend([v.clone(), s.clone()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
    } else {
        w.write_record([
            "source",
            "method",
            "protection",
            "k",
            "best_gamma",
            "acc_a",
            "acc_b",
            "mean",
        ])?;
        for (name, rows) in &merges {
            let mut best: Vec<(String, String, String, Vec<String>, f64)> = Vec::new();
            for r in rows {
                let mean = number(&r[6])?;
                match best
                    .iter_mut()
                    .find(|b| b.0 == r[0] && b.1 == r[1] && b.2 == r[3])
                {
                    Some(b) if mean > b.4 => {
                        b.3 = r.clone();
                        b.4 = mean;
                    }
                    Some(_) => {}
                    None => best.push((r[0].clone(), r[1].clone(), r[3].clone(), r.clone(), mean)),
                }
            }
            for (_, _, _, r, _) in best {
                w.write_record([
                    name.as_str(),
                    &r[0],
                    &r[1],
                    &r[3],
                    &r[2],
                    &r[4],
                    &r[5],
                    &r[6],
                ])?;
            }
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::CliError::Failure(e.to_string()))?;
    run.write(&a.out, &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(a.out.clone())
}
