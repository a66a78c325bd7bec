//! Two-model merging with influence-guided parameter protection.
//!
//! Task vectors are δ = θ_model − θ_base. Protection sets Θ_A and Θ_B hold
//! the global top-k fraction of each fine-tuned model's FI map.

mod search;

pub use search::{hyper_search, standard_grid, MergeGrid, ScoreRow, SearchResult};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fi::StabilityMap;
use crate::harness::rank_units;
use crate::zoo::{Checkpoint, TargetKind};

pub const DEFAULT_TIES_DENSITY: f64 = 0.2;
pub const DEFAULT_DARE_DROP: f64 = 0.9;

pub fn average_merge(a: &Checkpoint, b: &Checkpoint) -> Result<Checkpoint> {
    a.zip_map(b, |x, y| (x + y) / 2.0)
}

pub fn task_vector(model: &Checkpoint, base: &Checkpoint) -> Result<Checkpoint> {
    model.zip_map(base, |m, b| m - b)
}

/// θ_base + γ(δ_A + δ_B).
pub fn task_arithmetic(
    a: &Checkpoint,
    b: &Checkpoint,
    base: &Checkpoint,
    gamma: f64,
) -> Result<Checkpoint> {
    let da = task_vector(a, base)?;
    let db = task_vector(b, base)?;
    combine(base, &da.zip_map(&db, |x, y| x + y)?, gamma)
}

fn combine(base: &Checkpoint, delta: &Checkpoint, gamma: f64) -> Result<Checkpoint> {
    base.zip_map(delta, |b, d| b + gamma * d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSets {
    pub a: BTreeSet<usize>,
    pub b: BTreeSet<usize>,
    pub ratio: f64,
}

impl ProtectionSets {
    pub fn only_a(&self) -> impl Iterator<Item = &usize> {
        self.a.difference(&self.b)
    }

    pub fn only_b(&self) -> impl Iterator<Item = &usize> {
        self.b.difference(&self.a)
    }
}

/// Number of protected parameters for ratio `k` over `total`.
pub fn protected_count(k: f64, total: usize) -> usize {
    ((k * total as f64).ceil() as usize).min(total)
}

/// Global top-`ceil(k·total)` indices of each parameter map.
pub fn protection_sets(
    map_a: &StabilityMap,
    map_b: &StabilityMap,
    k: f64,
) -> Result<ProtectionSets> {
    if !(0.0..=1.0).contains(&k) {
        return Err(invalid(format!("protection ratio {k} outside [0, 1]")));
    }
    if map_a.target != TargetKind::Parameter || map_b.target != TargetKind::Parameter {
        return Err(invalid("protection needs parameter maps"));
    }
    let (ids_a, ids_b) = (map_a.ids(), map_b.ids());
    let same_space = ids_a.len() == ids_b.len()
        && ids_a.iter().copied().collect::<BTreeSet<_>>()
            == ids_b.iter().copied().collect::<BTreeSet<_>>();
    if !same_space {
        return Err(invalid("protection maps cover different parameter sets"));
    }
    let n = protected_count(k, ids_a.len());
    let top = |m: &StabilityMap| -> Result<BTreeSet<usize>> {
        if n == 0 {
            return Ok(BTreeSet::new());
        }
        Ok(rank_units(m)?.top(n).iter().copied().collect())
    };
    Ok(ProtectionSets {
        a: top(map_a)?,
        b: top(map_b)?,
        ratio: k,
    })
}

/// Revert Θ_A∖Θ_B to θ_A and Θ_B∖Θ_A to θ_B; everything else is kept.
pub fn apply_protection(
    merged: &Checkpoint,
    a: &Checkpoint,
    b: &Checkpoint,
    sets: &ProtectionSets,
) -> Result<Checkpoint> {
    merged.ensure_aligned(a)?;
    merged.ensure_aligned(b)?;
    let total = merged.total_len();
    if sets.a.iter().chain(&sets.b).any(|&i| i >= total) {
        return Err(invalid(format!("protected index outside 0..{total}")));
    }
    let mut flat = merged.flat();
    let (fa, fb) = (a.flat(), b.flat());
    for &i in sets.only_a() {
        flat[i] = fa[i];
    }
    for &i in sets.only_b() {
        flat[i] = fb[i];
    }
    merged.with_flat(&flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TiesStage {
    #[serde(rename = "none")]
    None,
    I,
    II,
}

impl FromStr for TiesStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TiesStage::None),
            "I" | "i" | "1" => Ok(TiesStage::I),
            "II" | "ii" | "2" => Ok(TiesStage::II),
            other => Err(invalid(format!("unknown TIES protection stage '{other}'"))),
        }
    }
}

impl fmt::Display for TiesStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TiesStage::None => "none",
            TiesStage::I => "I",
            TiesStage::II => "II",
        })
    }
}

/// Result of a merge plus anything worth reporting about it.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub checkpoint: Checkpoint,
    pub warnings: Vec<String>,
}

/// Per tensor, mask of the top `ceil(density·n)` entries by magnitude,
/// ties to the lower index, plus every exempt index.
fn trim_mask(delta: &Checkpoint, density: f64, exempt: Option<&BTreeSet<usize>>) -> Vec<bool> {
    let mut keep = vec![false; delta.total_len()];
    let mut offset = 0;
    for t in delta.tensors().values() {
        let n = t.len();
        let kept = ((density * n as f64).ceil() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| t.data[j].abs().total_cmp(&t.data[i].abs()).then(i.cmp(&j)));
        for &i in &order[..kept] {
            keep[offset + i] = true;
        }
        offset += n;
    }
    if let Some(set) = exempt {
        for &i in set {
            keep[i] = true;
        }
    }
    keep
}

/// Entries kept by the trim step, for counting.
pub fn ties_trim_count(
    delta: &Checkpoint,
    density: f64,
    exempt: Option<&BTreeSet<usize>>,
) -> usize {
    trim_mask(delta, density, exempt)
        .into_iter()
        .filter(|k| *k)
        .count()
}

/// Trim each task vector, elect the larger-magnitude entry (ties to δ_A),
/// and add γ times the result to the base.
///
/// Stage I exempts protected entries from trimming. Stage II forces the
/// untrimmed δ_A on Θ_A and δ_B on Θ_B; entries in both sets take δ_A.
#[allow(clippy::too_many_arguments)]
pub fn ties_merge(
    a: &Checkpoint,
    b: &Checkpoint,
    base: &Checkpoint,
    gamma: f64,
    density: f64,
    protection: Option<&ProtectionSets>,
    stage: TiesStage,
) -> Result<MergeOutcome> {
    let da = task_vector(a, base)?;
    let db = task_vector(b, base)?;
    ties_from_deltas(base, &da, &db, gamma, density, protection, stage)
}

fn ties_from_deltas(
    base: &Checkpoint,
    da: &Checkpoint,
    db: &Checkpoint,
    gamma: f64,
    density: f64,
    protection: Option<&ProtectionSets>,
    stage: TiesStage,
) -> Result<MergeOutcome> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("TIES density {density} outside (0, 1]")));
    }
    let sets = match (stage, protection) {
        (TiesStage::None, _) => None,
        (_, Some(s)) => Some(s),
        (_, None) => return Err(invalid(format!("TIES stage {stage} needs protection sets"))),
    };
    let total = base.total_len();
    if let Some(s) = sets {
        if s.a.iter().chain(&s.b).any(|&i| i >= total) {
            return Err(invalid(format!("protected index outside 0..{total}")));
        }
    }
    let (fa, fb) = (da.flat(), db.flat());
    let exempt_a = sets.filter(|_| stage == TiesStage::I).map(|s| &s.a);
    let exempt_b = sets.filter(|_| stage == TiesStage::I).map(|s| &s.b);
    let keep_a = trim_mask(da, density, exempt_a);
    let keep_b = trim_mask(db, density, exempt_b);
    let mut elected: Vec<f64> = (0..total)
        .map(|i| {
            let x = if keep_a[i] { fa[i] } else { 0.0 };
            let y = if keep_b[i] { fb[i] } else { 0.0 };
            if x.abs() >= y.abs() {
                x
            } else {
                y
            }
        })
        .collect();
    let mut warnings = Vec::new();
    if let (TiesStage::II, Some(s)) = (stage, sets) {
        for &i in &s.b {
            elected[i] = fb[i];
        }
        for &i in &s.a {
            elected[i] = fa[i];
        }
        let overlap = s.a.intersection(&s.b).count();
        if overlap > 0 {
            warnings.push(format!(
                "{overlap} entries protected in both models took the first model's value"
            ));
        }
    }
    let delta = base.with_flat(&elected)?;
    Ok(MergeOutcome {
        checkpoint: combine(base, &delta, gamma)?,
        warnings,
    })
}

/// Drop each entry with probability `drop_rate`, rescale survivors.
pub fn dare_transform(delta: &Checkpoint, drop_rate: f64, seed: u64) -> Result<Checkpoint> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(invalid(format!(
            "DARE drop rate {drop_rate} outside [0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - drop_rate;
    let flat: Vec<f64> = delta
        .flat()
        .into_iter()
        .map(|x| {
            let u: f64 = rng.random();
            if u < drop_rate {
                0.0
            } else {
                x / keep
            }
        })
        .collect();
    delta.with_flat(&flat)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Average,
    Task,
    Ties,
    DareTask,
    DareTies,
}

impl MergeMethod {
    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::Task => "task",
            MergeMethod::Ties => "ties",
            MergeMethod::DareTask => "dare-task",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    fn uses_gamma(self) -> bool {
        self != MergeMethod::Average
    }

    fn is_ties(self) -> bool {
        matches!(self, MergeMethod::Ties | MergeMethod::DareTies)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            MergeMethod::Average,
            MergeMethod::Task,
            MergeMethod::Ties,
            MergeMethod::DareTask,
            MergeMethod::DareTies,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| invalid(format!("unknown merge method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub gamma: f64,
    /// Protection ratio; `None` or 0 disables protection.
    pub k: Option<f64>,
    pub ties_density: f64,
    pub dare_drop: f64,
    pub stage: TiesStage,
    pub seed: u64,
}

impl MergeConfig {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            gamma: 1.0,
            k: None,
            ties_density: DEFAULT_TIES_DENSITY,
            dare_drop: DEFAULT_DARE_DROP,
            stage: TiesStage::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.uses_gamma() && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("γ = {} must be positive", self.gamma)));
        }
        if let Some(k) = self.k {
            if !(0.0..=1.0).contains(&k) {
                return Err(invalid(format!("protection ratio {k} outside [0, 1]")));
            }
        }
        if !(self.ties_density > 0.0 && self.ties_density <= 1.0) {
            return Err(invalid("TIES density must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dare_drop) {
            return Err(invalid("DARE drop rate must lie in [0, 1)"));
        }
        if self.method.is_ties() && self.protected() && self.stage == TiesStage::None {
            return Err(invalid("TIES protection needs stage I or II"));
        }
        if !self.method.is_ties() && self.stage != TiesStage::None {
            return Err(invalid(format!("{} has no protection stages", self.method)));
        }
        Ok(())
    }

    pub fn protected(&self) -> bool {
        self.k.is_some_and(|k| k > 0.0)
    }

    /// Short label of the protection variant.
    pub fn protection_label(&self) -> String {
        match (self.protected(), self.method.is_ties()) {
            (false, _) => "none".into(),
            (true, true) => format!("stage {} k={}", self.stage, self.k.unwrap_or(0.0)),
            (true, false) => format!("k={}", self.k.unwrap_or(0.0)),
        }
    }
}

/// Merge `a` and `b` over `base` under `config`. Protection needs the two
/// parameter maps.
pub fn merge(
    config: &MergeConfig,
    a: &Checkpoint,
    b: &Checkpoint,
    base: &Checkpoint,
    maps: Option<(&StabilityMap, &StabilityMap)>,
) -> Result<MergeOutcome> {
    config.validate()?;
    a.ensure_aligned(b)?;
    a.ensure_aligned(base)?;
    let sets = if config.protected() {
        let (ma, mb) = maps.ok_or_else(|| invalid("protection needs FI maps of both models"))?;
        Some(protection_sets(ma, mb, config.k.unwrap_or(0.0))?)
    } else {
        None
    };
    let stage = if sets.is_some() {
        config.stage
    } else {
        TiesStage::None
    };
    let post_hoc = |merged: Checkpoint| -> Result<MergeOutcome> {
        let checkpoint = match &sets {
            Some(s) => apply_protection(&merged, a, b, s)?,
            None => merged,
        };
        Ok(MergeOutcome {
            checkpoint,
            warnings: Vec::new(),
        })
    };
    let dare_deltas = || -> Result<(Checkpoint, Checkpoint)> {
        let da = dare_transform(&task_vector(a, base)?, config.dare_drop, config.seed)?;
        let db = dare_transform(
            &task_vector(b, base)?,
            config.dare_drop,
            config.seed.wrapping_add(1),
        )?;
        Ok((da, db))
    };
    match config.method {
        MergeMethod::Average => post_hoc(average_merge(a, b)?),
        MergeMethod::Task => post_hoc(task_arithmetic(a, b, base, config.gamma)?),
        MergeMethod::DareTask => {
            let (da, db) = dare_deltas()?;
            post_hoc(combine(
                base,
                &da.zip_map(&db, |x, y| x + y)?,
                config.gamma,
            )?)
        }
        MergeMethod::Ties => ties_merge(
            a,
            b,
            base,
            config.gamma,
            config.ties_density,
            sets.as_ref(),
            stage,
        ),
        MergeMethod::DareTies => {
            let (da, db) = dare_deltas()?;
            ties_from_deltas(
                base,
                &da,
                &db,
                config.gamma,
                config.ties_density,
                sets.as_ref(),
                stage,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fi::Measure;
    use crate::zoo::Tensor;

    fn ck(values: &[f64]) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
        c
    }

    fn pmap(values: &[f64]) -> StabilityMap {
        let ids: Vec<usize> = (0..values.len()).collect();
        StabilityMap::new(Measure::Fi, TargetKind::Parameter, &ids, values).unwrap()
    }

    #[test]
    fn average_cases() {
        let a = ck(&[1.0, -2.0, 0.3]);
        assert_eq!(average_merge(&a, &a).unwrap(), a);
        assert_eq!(
            average_merge(&a, &ck(&[-1.0, 2.0, -0.3])).unwrap().flat(),
            vec![0.0; 3]
        );
        assert!(average_merge(&a, &ck(&[1.0])).is_err());
    }

    #[test]
    fn task_arithmetic_cases() {
        let base = ck(&[1.0, 2.0]);
        let a = ck(&[3.0, 2.5]);
        let b = ck(&[-1.0, 0.0]);
        assert_eq!(task_arithmetic(&base, &base, &base, 0.7).unwrap(), base);
        assert_eq!(task_arithmetic(&a, &b, &base, 0.5).unwrap().flat()[0], 1.0);
        assert_eq!(task_arithmetic(&a, &b, &base, 0.0).unwrap(), base);
        let g0 = MergeConfig {
            gamma: 0.0,
            ..MergeConfig::new(MergeMethod::Task)
        };
        assert!(merge(&g0, &a, &b, &base, None).is_err());
    }

    #[test]
    fn ties_election_and_protection() {
        let base = ck(&[0.0, 0.0]);
        let a = ck(&[0.3, 0.1]);
        let b = ck(&[-0.5, -0.5]);
        let plain = ties_merge(&a, &b, &base, 1.0, 1.0, None, TiesStage::None).unwrap();
        assert_eq!(plain.checkpoint.flat(), vec![-0.5, -0.5]);
        let sets = ProtectionSets {
            a: [1].into(),
            b: BTreeSet::new(),
            ratio: 0.5,
        };
        let two = ties_merge(&a, &b, &base, 1.0, 1.0, Some(&sets), TiesStage::II).unwrap();
        assert_eq!(two.checkpoint.flat(), vec![-0.5, 0.1]);
        assert!(ties_merge(&a, &b, &base, 1.0, 1.0, None, TiesStage::I).is_err());
        let only_a = ties_merge(&a, &base, &base, 0.5, 1.0, None, TiesStage::None).unwrap();
        assert_eq!(only_a.checkpoint.flat(), vec![0.15, 0.05]);
    }

    #[test]
    fn stage_two_overlap_goes_to_a_with_warning() {
        let base = ck(&[0.0]);
        let sets = ProtectionSets {
            a: [0].into(),
            b: [0].into(),
            ratio: 1.0,
        };
        let out = ties_merge(
            &ck(&[0.1]),
            &ck(&[0.9]),
            &base,
            1.0,
            1.0,
            Some(&sets),
            TiesStage::II,
        )
        .unwrap();
        assert_eq!(out.checkpoint.flat(), vec![0.1]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn trim_counts() {
        let d = ck(&[0.5, -0.1, 0.2, 0.0, 0.9]);
        assert_eq!(ties_trim_count(&d, 0.2, None), 1);
        assert_eq!(ties_trim_count(&d, 0.5, None), 3);
        let exempt: BTreeSet<usize> = [3].into();
        assert_eq!(ties_trim_count(&d, 0.2, Some(&exempt)), 2);
    }

    #[test]
    fn dare_identity_and_determinism() {
        let d = ck(&[0.5, -0.1, 0.2]);
        assert_eq!(dare_transform(&d, 0.0, 3).unwrap(), d);
        assert_eq!(
            dare_transform(&d, 0.5, 3).unwrap(),
            dare_transform(&d, 0.5, 3).unwrap()
        );
        assert!(dare_transform(&d, 1.0, 3).is_err());
    }

    #[test]
    fn protection_sets_and_application() {
        let ma = pmap(&[0.1, 0.9, 0.5, 0.0]);
        let mb = pmap(&[0.8, 0.1, 0.5, 0.0]);
        let s = protection_sets(&ma, &mb, 0.25).unwrap();
        assert_eq!((s.a.clone(), s.b.clone()), ([1].into(), [0].into()));
        assert!(protection_sets(&ma, &mb, 0.0).unwrap().a.is_empty());
        let same = protection_sets(&ma, &ma, 0.5).unwrap();
        assert_eq!(same.a, same.b);
        let merged = ck(&[0.0; 4]);
        let a = ck(&[1.0, 2.0, 3.0, 4.0]);
        let b = ck(&[-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(
            apply_protection(&merged, &a, &b, &s).unwrap().flat(),
            vec![-1.0, 2.0, 0.0, 0.0]
        );
        assert_eq!(apply_protection(&merged, &a, &b, &same).unwrap(), merged);
        assert!(protection_sets(&ma, &pmap(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = MergeConfig::new(MergeMethod::Ties);
        c.k = Some(0.05);
        assert!(c.validate().is_err());
        c.stage = TiesStage::I;
        assert!(c.validate().is_ok());
        let mut avg = MergeConfig::new(MergeMethod::Average);
        avg.stage = TiesStage::II;
        assert!(avg.validate().is_err());
        assert_eq!(
            "dare-ties".parse::<MergeMethod>().unwrap(),
            MergeMethod::DareTies
        );
    }
}
