use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{merge, MergeConfig, MergeMethod, TiesStage};
use crate::error::{invalid, Result};
use crate::fi::StabilityMap;
use crate::harness::eval::csv_err;
use crate::zoo::Checkpoint;

/// Cartesian grid of γ and protection ratio over a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeGrid {
    pub base: MergeConfig,
    pub gammas: Vec<f64>,
    pub ks: Vec<Option<f64>>,
}

pub const GRID_GAMMAS: [f64; 6] = [0.3, 0.4, 0.5, 0.6, 0.9, 1.0];

/// k ∈ {1%, …, 10%} and γ ∈ {0.3, 0.4, 0.5, 0.6, 0.9, 1.0}.
pub fn standard_grid(method: MergeMethod, stage: TiesStage) -> MergeGrid {
    let mut base = MergeConfig::new(method);
    base.stage = stage;
    MergeGrid {
        base,
        gammas: GRID_GAMMAS.to_vec(),
        ks: (1..=10).map(|i| Some(i as f64 / 100.0)).collect(),
    }
}

impl MergeGrid {
    /// Configurations in evaluation order; average merging ignores γ.
    pub fn configs(&self) -> Vec<MergeConfig> {
        let gammas: &[f64] = if self.base.method == MergeMethod::Average {
            &[1.0]
        } else {
            &self.gammas
        };
        let mut out = Vec::new();
        for &k in &self.ks {
            for &gamma in gammas {
                out.push(MergeConfig {
                    gamma,
                    k,
                    ..self.base
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub config: MergeConfig,
    pub acc_a: f64,
    pub acc_b: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: ScoreRow,
    pub table: Vec<ScoreRow>,
}

impl SearchResult {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "protection",
            "gamma",
            "k",
            "acc_a",
            "acc_b",
            "mean",
        ])
        .map_err(csv_err)?;
        for r in &self.table {
            w.write_record([
                r.config.method.name().to_string(),
                r.config.protection_label(),
                r.config.gamma.to_string(),
                r.config.k.unwrap_or(0.0).to_string(),
                r.acc_a.to_string(),
                r.acc_b.to_string(),
                r.mean.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluate every grid configuration with `evaluate` (accuracy on domain A
/// and on domain B) and return the best mean. Ties go to the smaller k,
/// then the smaller γ.
pub fn hyper_search(
    grid: &MergeGrid,
    a: &Checkpoint,
    b: &Checkpoint,
    base: &Checkpoint,
    maps: Option<(&StabilityMap, &StabilityMap)>,
    evaluate: impl Fn(&Checkpoint) -> Result<(f64, f64)> + Sync,
) -> Result<SearchResult> {
    let configs = grid.configs();
    if configs.is_empty() {
        return Err(invalid("empty merge grid"));
    }
    let table: Vec<ScoreRow> = configs
        .par_iter()
        .map(|c| {
            let merged = merge(c, a, b, base, maps)?;
            let (acc_a, acc_b) = evaluate(&merged.checkpoint)?;
            Ok(ScoreRow {
                config: *c,
                acc_a,
                acc_b,
                mean: (acc_a + acc_b) / 2.0,
            })
        })
        .collect::<Result<_>>()?;
    let better = |r: &ScoreRow, best: &ScoreRow| {
        let key = |x: &ScoreRow| (x.config.k.unwrap_or(0.0), x.config.gamma);
        r.mean > best.mean || (r.mean == best.mean && key(r) < key(best))
    };
    let mut best = &table[0];
    for r in &table[1..] {
        if better(r, best) {
            best = r;
        }
    }
    Ok(SearchResult {
        best: best.clone(),
        table,
    })
}
