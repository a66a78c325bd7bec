use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rank_units;
use crate::error::{invalid, Error, Result};
use crate::fi::StabilityMap;
use crate::zoo::{Checkpoint, TargetKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsifyStrategy {
    FiHigh,
    Random,
}

impl SparsifyStrategy {
    pub fn name(self) -> &'static str {
        match self {
            SparsifyStrategy::FiHigh => "fi-high",
            SparsifyStrategy::Random => "random",
        }
    }
}

impl fmt::Display for SparsifyStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SparsifyStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fi-high" => Ok(SparsifyStrategy::FiHigh),
            "random" => Ok(SparsifyStrategy::Random),
            other => Err(invalid(format!("unknown sparsify strategy '{other}'"))),
        }
    }
}

/// Zero exactly `floor(fraction · total)` parameters.
///
/// `FiHigh` takes the top of the ranked `map` (which must be a parameter
/// map); `Random` draws indices uniformly without replacement under `seed`.
pub fn sparsify(
    ckpt: &Checkpoint,
    fraction: f64,
    strategy: SparsifyStrategy,
    map: Option<&StabilityMap>,
    seed: u64,
) -> Result<Checkpoint> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!(
            "sparsify fraction {fraction} outside [0, 1]"
        )));
    }
    let total = ckpt.total_len();
    let count = (fraction * total as f64).floor() as usize;
    let chosen: Vec<usize> = match strategy {
        SparsifyStrategy::FiHigh => {
            let map = map.ok_or_else(|| invalid("fi-high sparsification needs a stability map"))?;
            if map.target != TargetKind::Parameter {
                return Err(invalid("fi-high sparsification needs a parameter map"));
            }
            let ranked = rank_units(map)?;
            if ranked.len() < count {
                return Err(invalid(format!(
                    "map ranks {} parameters, {count} requested",
                    ranked.len()
                )));
            }
            ranked.top(count).to_vec()
        }
        SparsifyStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, count).into_vec()
        }
    };
    let mut flat = ckpt.flat();
    for i in chosen {
        if i >= total {
            return Err(invalid(format!("parameter {i} outside 0..{total}")));
        }
        flat[i] = 0.0;
    }
    ckpt.with_flat(&flat)
}

pub fn nonzero_count(ckpt: &Checkpoint) -> usize {
    ckpt.tensors()
        .values()
        .map(|t| t.data.iter().filter(|v| **v != 0.0).count())
        .sum()
}
