use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::norm;
use crate::zoo::ScoreMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Jacobian,
    Snip,
    Saliency,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Jacobian => "jacobian",
            BaselineKind::Snip => "snip",
            BaselineKind::Saliency => "saliency",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jacobian" => Ok(BaselineKind::Jacobian),
            "snip" => Ok(BaselineKind::Snip),
            "saliency" => Ok(BaselineKind::Saliency),
            other => Err(invalid(format!("unknown baseline measure '{other}'"))),
        }
    }
}

/// Jacobian norm, SNIP or saliency for one unit.
///
/// All three work on ∂_ω f(y) with f(y) = −log P(y), the negated score
/// columns. SNIP weights by `base_values`, the unperturbed values at the unit.
pub fn baseline_measure(
    kind: BaselineKind,
    scores: &ScoreMatrix,
    y_pred: usize,
    base_values: Option<&[f64]>,
) -> Result<f64> {
    let k = scores.classes();
    if y_pred >= k {
        return Err(invalid(format!("class {y_pred} outside 0..{k}")));
    }
    let fp: Vec<f64> = scores.column(y_pred).into_iter().map(|v| -v).collect();
    match kind {
        BaselineKind::Jacobian => Ok(norm(&fp)),
        BaselineKind::Snip => {
            let base = base_values.ok_or_else(|| invalid("snip needs base values"))?;
            if base.len() != fp.len() {
                return Err(invalid(format!(
                    "snip base values have {} entries, unit has {}",
                    base.len(),
                    fp.len()
                )));
            }
            let weighted: Vec<f64> = base.iter().zip(&fp).map(|(b, g)| b * g).collect();
            Ok(norm(&weighted))
        }
        BaselineKind::Saliency => {
            let m = scores.matrix();
            Ok((0..fp.len())
                .map(|j| {
                    let own = fp[j];
                    let others: f64 = (0..k).filter(|&y| y != y_pred).map(|y| -m[(j, y)]).sum();
                    if own < 0.0 || others > 0.0 {
                        0.0
                    } else {
                        -own * others
                    }
                })
                .sum())
        }
    }
}
