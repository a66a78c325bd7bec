//! Measure-guided attacks, sparsification and evaluation.

pub(crate) mod eval;
mod sparsify;

pub use eval::{
    continuations, evaluate, mean_std, rouge1, write_csv, EvalReport, Metric, ReportRow, CSV_HEADER,
};
pub use sparsify::{nonzero_count, sparsify, SparsifyStrategy};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fi::StabilityMap;
use crate::linalg::norm;
use crate::zoo::{
    apply_perturbation, class_gradients, Domain, PerturbationTarget, Sample, TargetKind, ZooModel,
};

pub const TIE_BREAK: &str = "ascending-id";

/// Units ordered from most to least sensitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedUnits {
    pub ids: Vec<usize>,
    pub values: Vec<f64>,
    pub measure: String,
    pub tie_break: String,
}

impl RankedUnits {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn top(&self, k: usize) -> &[usize] {
        &self.ids[..k.min(self.ids.len())]
    }
}

/// Stable descending sort of a map; equal values keep ascending id order.
pub fn rank_units(map: &StabilityMap) -> Result<RankedUnits> {
    if map.is_empty() {
        return Err(invalid("cannot rank an empty map"));
    }
    let mut units = map.units.clone();
    units.sort_by(|a, b| b.value.total_cmp(&a.value).then(a.id.cmp(&b.id)));
    Ok(RankedUnits {
        ids: units.iter().map(|u| u.id).collect(),
        values: units.iter().map(|u| u.value).collect(),
        measure: map.measure.name().to_string(),
        tie_break: TIE_BREAK.to_string(),
    })
}

/// Uniformly random order of `ids` under `seed`; values are all zero.
pub fn random_ranking(ids: &[usize], seed: u64) -> RankedUnits {
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    RankedUnits {
        values: vec![0.0; order.len()],
        ids: order,
        measure: "random".to_string(),
        tie_break: "seeded-shuffle".to_string(),
    }
}

/// Set the three channels of the top `k` ranked pixels to `mask_value`.
pub fn mask_pixels(
    image: &[f64],
    ranked: &RankedUnits,
    k: usize,
    mask_value: f64,
) -> Result<Vec<f64>> {
    if !image.len().is_multiple_of(3) {
        return Err(invalid("image length is not a multiple of 3"));
    }
    let pixels = image.len() / 3;
    if k > ranked.len() || k > pixels {
        return Err(invalid(format!(
            "cannot mask {k} of {} pixels",
            ranked.len().min(pixels)
        )));
    }
    let mut out = image.to_vec();
    for &p in ranked.top(k) {
        if p >= pixels {
            return Err(invalid(format!("pixel {p} outside 0..{pixels}")));
        }
        out[3 * p..3 * p + 3].fill(mask_value);
    }
    Ok(out)
}

/// Number of embedding dimensions an attack with `fraction` touches.
pub fn attack_width(fraction: f64, dims: usize) -> usize {
    ((fraction * dims as f64).ceil() as usize).clamp(1, dims)
}

/// Push the top `ceil(fraction·D)` ranked embedding dimensions by ε against
/// the gradient of log P(y_pred).
pub fn embed_attack(
    model: &ZooModel,
    sample: &Sample,
    ranked: &RankedUnits,
    fraction: f64,
    epsilon: f64,
) -> Result<Sample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!(
            "attack fraction {fraction} outside (0, 1]"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(invalid(format!("attack step {epsilon} must be positive")));
    }
    let d = model
        .embedding_dim()
        .ok_or_else(|| invalid("embedding attacks need a tiny-transformer"))?;
    let n = attack_width(fraction, d);
    if ranked.len() < n {
        return Err(invalid(format!(
            "ranking has {} dims, attack needs {n}",
            ranked.len()
        )));
    }
    let dims = ranked.top(n).to_vec();
    let cg = class_gradients(model, sample, Domain::Embedding)?;
    let y_pred = cg.probs.argmax();
    let g: Vec<f64> = dims.iter().map(|&j| cg.grads[y_pred][j]).collect();
    let gn = norm(&g);
    if gn == 0.0 {
        return Err(Error::DegenerateAttack(format!(
            "zero gradient on embedding dims {dims:?}"
        )));
    }
    let omega: Vec<f64> = g.iter().map(|v| -epsilon * v / gn).collect();
    let target = PerturbationTarget::new(TargetKind::EmbeddingDim, dims);
    Ok(apply_perturbation(model, sample, &target, &omega)?.1)
}

/// Plain-text colour image of values in [0, 1], interleaved RGB.
pub fn to_ppm(image: &[f64], width: usize, height: usize) -> Result<String> {
    if image.len() != width * height * 3 {
        return Err(invalid("image size does not match the grid"));
    }
    let mut out = format!("P3\n{width} {height}\n255\n");
    for row in image.chunks(width * 3) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out)
}
