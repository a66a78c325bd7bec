use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baseline::{baseline_measure, BaselineKind};
use super::fi_for_prediction;
use crate::error::{invalid, Error, Result};
use crate::zoo::{class_gradients, unit_count, Sample, TargetKind, ZooModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    Fi,
    Jacobian,
    Snip,
    Saliency,
}

impl Measure {
    pub const ALL: [Measure; 4] = [
        Measure::Fi,
        Measure::Jacobian,
        Measure::Snip,
        Measure::Saliency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Measure::Fi => "fi",
            Measure::Jacobian => "jacobian",
            Measure::Snip => "snip",
            Measure::Saliency => "saliency",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            Measure::Fi => None,
            Measure::Jacobian => Some(BaselineKind::Jacobian),
            Measure::Snip => Some(BaselineKind::Snip),
            Measure::Saliency => Some(BaselineKind::Saliency),
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown measure '{s}'")))
    }
}

/// A family of single-unit targets scored together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetFamily {
    AllPixels,
    AllParams,
    AllEmbedDims,
    AllInputDims,
    ParamSubset(Vec<usize>),
}

impl TargetFamily {
    pub fn kind(&self) -> TargetKind {
        match self {
            TargetFamily::AllPixels => TargetKind::Pixel,
            TargetFamily::AllParams | TargetFamily::ParamSubset(_) => TargetKind::Parameter,
            TargetFamily::AllEmbedDims => TargetKind::EmbeddingDim,
            TargetFamily::AllInputDims => TargetKind::InputDim,
        }
    }

    pub fn units(&self, model: &ZooModel) -> Result<Vec<usize>> {
        let n = unit_count(model, self.kind())?;
        let units: Vec<usize> = match self {
            TargetFamily::ParamSubset(ids) => {
                if let Some(bad) = ids.iter().find(|&&i| i >= n) {
                    return Err(invalid(format!("parameter {bad} outside 0..{n}")));
                }
                ids.clone()
            }
            _ => (0..n).collect(),
        };
        if units.is_empty() {
            return Err(invalid("target family selects no units"));
        }
        Ok(units)
    }
}

impl FromStr for TargetFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixels" | "all-pixels" => Ok(TargetFamily::AllPixels),
            "params" | "all-params" => Ok(TargetFamily::AllParams),
            "embed" | "all-embed-dims" => Ok(TargetFamily::AllEmbedDims),
            "input-dims" | "all-input-dims" => Ok(TargetFamily::AllInputDims),
            other => Err(invalid(format!("unknown target family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitValue {
    pub id: usize,
    pub value: f64,
}

/// One measure value per unit, with the model and input it was computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityMap {
    pub measure: Measure,
    pub target: TargetKind,
    pub model: String,
    pub input: String,
    pub units: Vec<UnitValue>,
}

impl StabilityMap {
    pub fn new(
        measure: Measure,
        target: TargetKind,
        ids: &[usize],
        values: &[f64],
    ) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(invalid("ids and values differ in length"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("stability map values must be finite"));
        }
        Ok(Self {
            measure,
            target,
            model: String::new(),
            input: String::new(),
            units: ids
                .iter()
                .zip(values)
                .map(|(&id, &value)| UnitValue { id, value })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.id).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.value).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Self = serde_json::from_str(text)?;
        if map.units.iter().any(|u| !u.value.is_finite()) {
            return Err(invalid("stability map values must be finite"));
        }
        Ok(map)
    }

    /// Plain-text graymap of a full pixel map, min → 0 and max → 255.
    pub fn to_pgm(&self, width: usize, height: usize) -> Result<String> {
        if self.target != TargetKind::Pixel {
            return Err(invalid("graymap export needs a pixel map"));
        }
        if self.units.len() != width * height
            || self.units.iter().enumerate().any(|(i, u)| u.id != i)
        {
            return Err(invalid("graymap export needs every pixel in order"));
        }
        let values = self.values();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let level = |v: f64| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            }
        };
        let mut out = format!("P2\n{width} {height}\n255\n");
        for row in values.chunks(width) {
            let line: Vec<String> = row.iter().map(|v| level(*v).to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Unperturbed values at every coordinate of the target's domain.
///
/// Embedding dimensions take the mean over the prompt of that dimension of
/// the (shifted) token embeddings.
pub fn unit_base_values(model: &ZooModel, sample: &Sample, kind: TargetKind) -> Result<Vec<f64>> {
    model.check_sample(sample)?;
    match kind {
        TargetKind::Parameter => Ok(model.checkpoint().flat()),
        TargetKind::Pixel | TargetKind::InputDim => sample
            .features()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| invalid("input targets need a feature sample")),
        TargetKind::EmbeddingDim => {
            let Sample::Tokens { ids, shift } = sample else {
                return Err(invalid("embedding targets need a token sample"));
            };
            let table = model
                .checkpoint()
                .get("tok_emb")
                .ok_or_else(|| invalid("model has no token embedding"))?;
            let d = table.shape[1];
            Ok((0..d)
                .map(|j| {
                    let mean =
                        ids.iter().map(|&t| table.data[t * d + j]).sum::<f64>() / ids.len() as f64;
                    mean + shift.as_ref().map_or(0.0, |s| s[j])
                })
                .collect())
        }
    }
}

fn fnv1a(words: impl IntoIterator<Item = u64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

pub(crate) fn model_fingerprint(model: &ZooModel) -> String {
    let flat = model.checkpoint().flat();
    format!(
        "{}:{}",
        model.arch(),
        fnv1a(flat.iter().map(|v| v.to_bits()))
    )
}

pub(crate) fn sample_fingerprint(sample: &Sample) -> String {
    match sample {
        Sample::Features(x) => fnv1a(x.iter().map(|v| v.to_bits())),
        Sample::Tokens { ids, shift } => fnv1a(
            ids.iter()
                .map(|&i| i as u64)
                .chain(shift.iter().flatten().map(|v| v.to_bits())),
        ),
    }
}

/// Score every unit of `family` independently with `measure`.
pub fn stability_map(
    model: &ZooModel,
    sample: &Sample,
    family: &TargetFamily,
    measure: Measure,
) -> Result<StabilityMap> {
    let kind = family.kind();
    let units = family.units(model)?;
    let cg = class_gradients(model, sample, kind.into())?;
    let y_pred = cg.probs.argmax();
    let base = match measure {
        Measure::Snip => Some(unit_base_values(model, sample, kind)?),
        _ => None,
    };
    let w = kind.unit_width();
    let values: Vec<f64> = units
        .par_iter()
        .map(|&u| {
            let coords: Vec<usize> = (u * w..(u + 1) * w).collect();
            let scores = cg.scores_for(&coords);
            match measure.baseline() {
                None => fi_for_prediction(&scores, &cg.probs, y_pred).map(|r| r.value),
                Some(b) => baseline_measure(
                    b,
                    &scores,
                    y_pred,
                    base.as_ref().map(|v| &v[u * w..(u + 1) * w]),
                ),
            }
        })
        .collect::<Result<_>>()?;
    let mut map = StabilityMap::new(measure, kind, &units, &values)?;
    map.model = model_fingerprint(model);
    map.input = sample_fingerprint(sample);
    Ok(map)
}

/// Per-unit mean of the maps over several inputs.
pub fn mean_stability_map(
    model: &ZooModel,
    samples: &[Sample],
    family: &TargetFamily,
    measure: Measure,
) -> Result<StabilityMap> {
    if samples.is_empty() {
        return Err(invalid("mean stability map needs at least one input"));
    }
    let maps: Vec<StabilityMap> = samples
        .par_iter()
        .map(|s| stability_map(model, s, family, measure))
        .collect::<Result<_>>()?;
    let n = maps.len() as f64;
    let mut mean = maps[0].clone();
    for (i, u) in mean.units.iter_mut().enumerate() {
        u.value = maps.iter().map(|m| m.units[i].value).sum::<f64>() / n;
    }
    mean.input = format!(
        "mean-of-{}:{}",
        samples.len(),
        fnv1a(maps.iter().flat_map(|m| m.input.bytes().map(u64::from)))
    );
    Ok(mean)
}
