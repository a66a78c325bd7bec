//! Perturbation targets, class distributions and score matrices.
//!
//! A perturbation ω enters additively at ω₀ = 0: parameters become θᵢ + ωᵢ,
//! pixels and features x + ω, and an embedding-dimension perturbation adds
//! ω_j to dimension j of every token embedding of the prompt.

use serde::{Deserialize, Serialize};

use super::model::{Arch, InputSpec, Sample, ZooModel};
use super::net::{self, GradMode};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// Floor applied to class probabilities before any log is taken.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Parameter,
    Pixel,
    InputDim,
    EmbeddingDim,
}

impl TargetKind {
    /// Scalar coordinates per unit.
    pub fn unit_width(self) -> usize {
        match self {
            TargetKind::Pixel => 3,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetKind::Parameter => "parameter",
            TargetKind::Pixel => "pixel",
            TargetKind::InputDim => "input-dim",
            TargetKind::EmbeddingDim => "embedding-dim",
        }
    }
}

/// Space a perturbation coordinate lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Parameters,
    Input,
    Embedding,
}

impl From<TargetKind> for Domain {
    fn from(kind: TargetKind) -> Self {
        match kind {
            TargetKind::Parameter => Domain::Parameters,
            TargetKind::Pixel | TargetKind::InputDim => Domain::Input,
            TargetKind::EmbeddingDim => Domain::Embedding,
        }
    }
}

/// The units a perturbation ω is applied to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationTarget {
    pub kind: TargetKind,
    pub unit_ids: Vec<usize>,
}

impl PerturbationTarget {
    pub fn new(kind: TargetKind, unit_ids: Vec<usize>) -> Self {
        Self { kind, unit_ids }
    }

    pub fn parameter(index: usize) -> Self {
        Self::new(TargetKind::Parameter, vec![index])
    }

    pub fn pixel(index: usize) -> Self {
        Self::new(TargetKind::Pixel, vec![index])
    }

    pub fn input_dim(index: usize) -> Self {
        Self::new(TargetKind::InputDim, vec![index])
    }

    pub fn embedding_dim(index: usize) -> Self {
        Self::new(TargetKind::EmbeddingDim, vec![index])
    }

    /// Total perturbation dimension p.
    pub fn dim(&self) -> usize {
        self.unit_ids.len() * self.kind.unit_width()
    }

    /// Flat coordinates inside the target's domain.
    pub fn coords(&self) -> Vec<usize> {
        let w = self.kind.unit_width();
        self.unit_ids
            .iter()
            .flat_map(|u| (0..w).map(move |c| u * w + c))
            .collect()
    }

    pub fn validate(&self, model: &ZooModel) -> Result<()> {
        if self.unit_ids.is_empty() {
            return Err(invalid("perturbation target selects no units"));
        }
        let units = unit_count(model, self.kind)?;
        if let Some(bad) = self.unit_ids.iter().find(|&&u| u >= units) {
            return Err(invalid(format!(
                "{} unit {bad} outside 0..{units}",
                self.kind.name()
            )));
        }
        Ok(())
    }
}

/// Number of units of `kind` the model exposes.
pub fn unit_count(model: &ZooModel, kind: TargetKind) -> Result<usize> {
    match (kind, model.input_spec()) {
        (TargetKind::Parameter, _) => Ok(model.param_count()),
        (TargetKind::Pixel, InputSpec::Pixels { width, height }) => Ok(width * height),
        (TargetKind::InputDim, spec) if spec.feature_len().is_some() => {
            Ok(spec.feature_len().expect("checked"))
        }
        (TargetKind::EmbeddingDim, InputSpec::Tokens { .. }) => {
            Ok(model.embedding_dim().expect("transformer"))
        }
        (kind, _) => Err(invalid(format!(
            "{} targets are not valid for {}",
            kind.name(),
            model.arch()
        ))),
    }
}

/// Probabilities over the model's K classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    probs: Vec<f64>,
}

impl ClassDistribution {
    /// Stable softmax, floored at [`PROB_FLOOR`] and renormalised.
    pub fn from_logits(logits: &[f64]) -> Self {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Self::from_probs(exps.into_iter().map(|e| e / z).collect())
    }

    pub fn from_probs(raw: Vec<f64>) -> Self {
        let clamped: Vec<f64> = raw.into_iter().map(|p| p.max(PROB_FLOOR)).collect();
        let total: f64 = clamped.iter().sum();
        Self {
            probs: clamped.into_iter().map(|p| p / total).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most likely class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn log_prob(&self, class: usize) -> f64 {
        self.probs[class].ln()
    }
}

/// Per-class log-likelihood gradients: column y is ∂_ω log P(y | ·) at ω = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: Matrix,
}

impl ScoreMatrix {
    /// `scores` is p × K.
    pub fn new(scores: Matrix) -> Result<Self> {
        if !scores.is_finite() {
            return Err(invalid("score matrix has non-finite entries"));
        }
        Ok(Self { scores })
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let k = columns.len();
        let p = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != p) {
            return Err(invalid("score columns differ in length"));
        }
        Self::new(Matrix::from_fn(p, k, |i, j| columns[j][i]))
    }

    pub fn dim(&self) -> usize {
        self.scores.rows()
    }

    pub fn classes(&self) -> usize {
        self.scores.cols()
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        self.scores.col(class)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.scores
    }

    /// Scores in reparameterised coordinates ω = Aν, i.e. Aᵀ s.
    pub fn reparameterize(&self, a: &Matrix) -> Result<Self> {
        if a.rows() != self.dim() {
            return Err(invalid("reparameterisation has wrong dimension"));
        }
        Self::new(a.t_matmul(&self.scores))
    }
}

/// Full-domain gradients of every class log-probability for one sample.
#[derive(Debug, Clone)]
pub struct ClassGradients {
    pub probs: ClassDistribution,
    /// K vectors over the whole domain.
    pub grads: Vec<Vec<f64>>,
}

impl ClassGradients {
    pub fn scores_for(&self, coords: &[usize]) -> ScoreMatrix {
        let k = self.grads.len();
        ScoreMatrix::new(Matrix::from_fn(coords.len(), k, |i, y| {
            self.grads[y][coords[i]]
        }))
        .expect("finite gradients")
    }

    pub fn domain_len(&self) -> usize {
        self.grads.first().map_or(0, Vec::len)
    }
}

fn last_row(m: &Matrix) -> Vec<f64> {
    m.row(m.rows() - 1).to_vec()
}

pub fn forward_probs(model: &ZooModel, sample: &Sample) -> Result<ClassDistribution> {
    model.check_sample(sample)?;
    let graph = net::build(model, sample, GradMode::Nothing);
    Ok(ClassDistribution::from_logits(&last_row(
        graph.tape.value(graph.logits),
    )))
}

/// Probabilities for many feature samples in one batched pass.
pub fn forward_probs_batch(model: &ZooModel, samples: &[Sample]) -> Result<Vec<ClassDistribution>> {
    if !model.arch().is_classifier() {
        return samples.iter().map(|s| forward_probs(model, s)).collect();
    }
    let width = model.input_spec().feature_len().expect("classifier");
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in samples {
        model.check_sample(s)?;
        data.extend_from_slice(s.features().expect("checked"));
    }
    let graph = net::build_batch(model, Matrix::from_vec(samples.len(), width, data)?, false);
    let logits = graph.tape.value(graph.logits);
    Ok((0..samples.len())
        .map(|i| ClassDistribution::from_logits(logits.row(i)))
        .collect())
}

/// ∂_ω log P(y | ·) over the whole domain, one backward pass per class.
pub fn class_gradients(
    model: &ZooModel,
    sample: &Sample,
    domain: Domain,
) -> Result<ClassGradients> {
    model.check_sample(sample)?;
    let mode = match (domain, model.arch()) {
        (Domain::Parameters, _) => GradMode::Params,
        (Domain::Input, arch) if arch.is_classifier() => GradMode::Input,
        (Domain::Embedding, Arch::TinyTransformer) => GradMode::Embedding,
        _ => {
            return Err(invalid(format!(
                "{domain:?} perturbations are not valid for {}",
                model.arch()
            )))
        }
    };
    let graph = net::build(model, sample, mode);
    let logits = graph.tape.value(graph.logits);
    let (rows, k) = logits.shape();
    let probs = ClassDistribution::from_logits(&last_row(logits));
    let mut grads = Vec::with_capacity(k);
    for class in 0..k {
        // d log P(class) / d logits = e_class − P, on the predicting row only
        let mut seed = Matrix::zeros(rows, k);
        for (j, p) in probs.probs().iter().enumerate() {
            seed[(rows - 1, j)] = if j == class { 1.0 - p } else { -p };
        }
        let g = graph.tape.backward(graph.logits, seed);
        let flat = match mode {
            GradMode::Params => net::flatten_param_grads(&graph, &g, model.checkpoint()),
            GradMode::Input => g
                .get(graph.input.expect("input leaf"))
                .expect("input gradient")
                .data()
                .to_vec(),
            GradMode::Embedding => g
                .get(graph.shift.expect("shift leaf"))
                .expect("shift gradient")
                .data()
                .to_vec(),
            GradMode::Nothing => unreachable!(),
        };
        grads.push(flat);
    }
    Ok(ClassGradients { probs, grads })
}

pub fn score_matrix(
    model: &ZooModel,
    sample: &Sample,
    target: &PerturbationTarget,
) -> Result<ScoreMatrix> {
    Ok(scores_and_probs(model, sample, target)?.0)
}

pub fn scores_and_probs(
    model: &ZooModel,
    sample: &Sample,
    target: &PerturbationTarget,
) -> Result<(ScoreMatrix, ClassDistribution)> {
    target.validate(model)?;
    let cg = class_gradients(model, sample, target.kind.into())?;
    Ok((cg.scores_for(&target.coords()), cg.probs))
}

/// ∂_ω f for f(ω) = −log P(y_pred | ·), i.e. the negated score column.
pub fn loss_gradient(
    model: &ZooModel,
    sample: &Sample,
    y_pred: usize,
    target: &PerturbationTarget,
) -> Result<Vec<f64>> {
    if y_pred >= model.class_count() {
        return Err(invalid(format!(
            "class {y_pred} outside 0..{}",
            model.class_count()
        )));
    }
    let scores = score_matrix(model, sample, target)?;
    Ok(scores.column(y_pred).into_iter().map(|v| -v).collect())
}

/// Additive perturbation of the targeted coordinates.
pub fn apply_perturbation(
    model: &ZooModel,
    sample: &Sample,
    target: &PerturbationTarget,
    omega: &[f64],
) -> Result<(ZooModel, Sample)> {
    target.validate(model)?;
    model.check_sample(sample)?;
    if omega.len() != target.dim() {
        return Err(invalid(format!(
            "perturbation has {} entries, target needs {}",
            omega.len(),
            target.dim()
        )));
    }
    let coords = target.coords();
    match target.kind {
        TargetKind::Parameter => {
            let mut ckpt = model.checkpoint().clone();
            for (c, w) in coords.iter().zip(omega) {
                ckpt.add_flat(*c, *w)?;
            }
            Ok((model.with_checkpoint(ckpt)?, sample.clone()))
        }
        TargetKind::Pixel | TargetKind::InputDim => {
            let mut x = sample.features().expect("checked").to_vec();
            for (c, w) in coords.iter().zip(omega) {
                x[*c] += w;
            }
            Ok((model.clone(), Sample::Features(x)))
        }
        TargetKind::EmbeddingDim => {
            let Sample::Tokens { ids, shift } = sample else {
                unreachable!("validated")
            };
            let d = model.embedding_dim().expect("transformer");
            let mut s = shift.clone().unwrap_or_else(|| vec![0.0; d]);
            for (c, w) in coords.iter().zip(omega) {
                s[*c] += w;
            }
            Ok((
                model.clone(),
                Sample::Tokens {
                    ids: ids.clone(),
                    shift: Some(s),
                },
            ))
        }
    }
}
