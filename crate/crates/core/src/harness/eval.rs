use std::collections::HashMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::zoo::train::generate_with;
use crate::zoo::{forward_probs_batch, Dataset, ZooModel};

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Accuracy,
    /// Unigram F1 of `length` sampled continuations against `references`,
    /// one per example, sampled with stream `i` of `seed` for example `i`.
    Rouge1 {
        references: Vec<Vec<usize>>,
        length: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub condition: String,
    /// Examples whose top probability was shared (resolved to the lowest class).
    pub ties: usize,
}

impl EvalReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            condition: self.condition.clone(),
            metric: self.metric.clone(),
            value: self.value,
            std: 0.0,
            seeds: self.seeds.clone(),
        }
    }
}

/// Continuations of every prompt in `data`, example `i` on stream `i`.
pub fn continuations(
    model: &ZooModel,
    data: &Dataset,
    length: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    data.examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let prompt = e
                .sample
                .token_ids()
                .ok_or_else(|| invalid("generation needs token prompts"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let seq = generate_with(model, prompt, length, &mut rng)?;
            Ok(seq[prompt.len()..].to_vec())
        })
        .collect()
}

pub fn evaluate(
    model: &ZooModel,
    data: &Dataset,
    metric: &Metric,
    condition: &str,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    match metric {
        Metric::Accuracy => {
            let probs = forward_probs_batch(model, &data.samples())?;
            let mut hits = 0;
            let mut ties = 0;
            for (p, e) in probs.iter().zip(&data.examples) {
                let best = p.argmax();
                hits += usize::from(best == e.label);
                let top = p.probs()[best];
                ties += usize::from(p.probs().iter().filter(|v| **v == top).count() > 1);
            }
            Ok(EvalReport {
                metric: "accuracy".into(),
                value: hits as f64 / data.len() as f64,
                samples: data.len(),
                seeds: Vec::new(),
                condition: condition.into(),
                ties,
            })
        }
        Metric::Rouge1 {
            references,
            length,
            seed,
        } => {
            if references.len() != data.len() {
                return Err(invalid(format!(
                    "{} references for {} prompts",
                    references.len(),
                    data.len()
                )));
            }
            let outs = continuations(model, data, *length, *seed)?;
            let total: f64 = outs.iter().zip(references).map(|(c, r)| rouge1(c, r)).sum();
            Ok(EvalReport {
                metric: "rouge1".into(),
                value: total / data.len() as f64,
                samples: data.len(),
                seeds: vec![*seed],
                condition: condition.into(),
                ties: 0,
            })
        }
    }
}

/// Unigram-overlap F1 with multiset counts.
pub fn rouge1(candidate: &[usize], reference: &[usize]) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in reference {
        *counts.entry(*t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in candidate {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / candidate.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub metric: String,
    pub value: f64,
    pub std: f64,
    pub seeds: Vec<u64>,
}

impl ReportRow {
    /// Mean ± std over per-seed reports of one condition.
    pub fn aggregate(condition: &str, reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| invalid("no reports to aggregate"))?;
        let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
        let (value, std) = mean_std(&values);
        Ok(Self {
            condition: condition.into(),
            metric: first.metric.clone(),
            value,
            std,
            seeds: reports
                .iter()
                .flat_map(|r| r.seeds.iter().copied())
                .collect(),
        })
    }
}

pub const CSV_HEADER: [&str; 5] = ["condition", "metric", "value", "std", "seeds"];

pub fn write_csv(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        w.write_record([
            r.condition.clone(),
            r.metric.clone(),
            r.value.to_string(),
            r.std.to_string(),
            seeds.join(";"),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    invalid(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge1(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(rouge1(&[1, 2], &[3, 4]), 0.0);
        assert!((rouge1(&[0, 1, 1], &[1, 1, 2]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rouge1(&[], &[]), 1.0);
        assert_eq!(rouge1(&[1], &[]), 0.0);
    }

    #[test]
    fn mean_std_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![ReportRow {
            condition: "mask k=10, fi".into(),
            metric: "accuracy".into(),
            value: 0.5,
            std: 0.0,
            seeds: vec![1, 2],
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "condition,metric,value,std,seeds\n\"mask k=10, fi\",accuracy,0.5,0,1;2\n"
        );
    }
}
