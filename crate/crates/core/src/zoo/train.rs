//! Minibatch Adam training of the zoo architectures, plus sampling from the
//! tiny transformer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example};
use super::model::{Arch, Sample, ZooModel};
use super::net::{self, GradMode};
use super::perturb::{forward_probs, forward_probs_batch, ClassDistribution};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Hidden widths of classifiers; ignored by softmax regression.
    pub hidden: Vec<usize>,
    pub d_model: usize,
    pub layers: usize,
    pub context: usize,
    /// Class count (vocabulary for the transformer); inferred when absent.
    pub classes: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Mass spread uniformly over all classes in the cross-entropy target.
    #[serde(default)]
    pub label_smoothing: f64,
}

impl TrainConfig {
    pub fn for_arch(arch: Arch) -> Self {
        let base = Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            hidden: vec![64, 64],
            d_model: 32,
            layers: 2,
            context: 64,
            classes: None,
            clip_norm: None,
            label_smoothing: 0.0,
        };
        match arch {
            Arch::SoftmaxRegression => Self {
                learning_rate: 0.05,
                hidden: Vec::new(),
                ..base
            },
            Arch::MlpClassifier => base,
            Arch::VisionClassifier => Self {
                epochs: 20,
                learning_rate: 0.002,
                hidden: vec![128, 64],
                ..base
            },
            Arch::TinyTransformer => Self {
                epochs: 8,
                batch_size: 16,
                learning_rate: 0.003,
                hidden: Vec::new(),
                clip_norm: Some(1.0),
                ..base
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ZooModel,
    /// Classification accuracy, or per-token accuracy for the transformer.
    pub train_accuracy: f64,
    /// Mean cross-entropy over the last epoch.
    pub final_loss: f64,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn infer_classes(arch: Arch, data: &Dataset) -> usize {
    let mut top = data.max_label().unwrap_or(0);
    if arch == Arch::TinyTransformer {
        for e in &data.examples {
            if let Some(ids) = e.sample.token_ids() {
                top = top.max(ids.iter().copied().max().unwrap_or(0));
            }
        }
    }
    (top + 1).max(2)
}

fn feature_len(data: &Dataset) -> Result<usize> {
    let first = data.examples[0]
        .sample
        .features()
        .ok_or_else(|| invalid("classifier training needs feature samples"))?;
    Ok(first.len())
}

/// Fresh model with the geometry implied by `arch`, `config` and the data.
pub fn init_model(arch: Arch, data: &Dataset, config: &TrainConfig, seed: u64) -> Result<ZooModel> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let classes = config.classes.unwrap_or_else(|| infer_classes(arch, data));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ckpt = match arch {
        Arch::TinyTransformer => net::init_transformer(
            classes,
            config.d_model,
            config.layers,
            config.context,
            &mut rng,
        ),
        _ => {
            let mut widths = vec![feature_len(data)?];
            if arch != Arch::SoftmaxRegression {
                widths.extend(&config.hidden);
            }
            widths.push(classes);
            net::init_mlp(&widths, &mut rng)
        }
    };
    ZooModel::new(arch, classes, ckpt)
}

/// Train a fresh model. Deterministic given `seed`.
pub fn train_toy(
    arch: Arch,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    let model = init_model(arch, data, config, seed)?;
    fine_tune(&model, data, config, seed)
}

/// Continue training from `model`'s current parameters.
pub fn fine_tune(
    model: &ZooModel,
    data: &Dataset,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainedModel> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(invalid("epochs and batch size must be positive"));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(invalid("learning rate must be positive"));
    }
    if !(0.0..1.0).contains(&config.label_smoothing) {
        return Err(invalid("label smoothing must lie in [0, 1)"));
    }
    for e in &data.examples {
        if e.label >= model.class_count() {
            return Err(invalid(format!(
                "label {} outside 0..{}",
                e.label,
                model.class_count()
            )));
        }
        model.check_sample(&e.sample)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a1e);
    let mut flat = model.checkpoint().flat();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut current = model.clone();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.examples[i]).collect();
            let (loss, mut grad) = if current.arch().is_classifier() {
                classifier_batch(&current, &batch, config.label_smoothing)?
            } else {
                transformer_batch(&current, &batch, config.label_smoothing)
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure(format!(
                    "non-finite loss in epoch {epoch}"
                )));
            }
            if let Some(clip) = config.clip_norm {
                let n = crate::linalg::norm(&grad);
                if n > clip {
                    grad.iter_mut().for_each(|g| *g *= clip / n);
                }
            }
            adam.step(&mut flat, &grad);
            if flat.iter().any(|w| !w.is_finite()) {
                return Err(Error::TrainingFailure(format!(
                    "parameters diverged in epoch {epoch}"
                )));
            }
            current = current.with_checkpoint(current.checkpoint().with_flat(&flat)?)?;
            loss_sum += loss;
            batches += 1;
        }
        final_loss = loss_sum / batches as f64;
    }
    let train_accuracy = accuracy(&current, data)?;
    Ok(TrainedModel {
        model: current,
        train_accuracy,
        final_loss,
    })
}

/// Cross-entropy against the smoothed one-hot target; writes the logit
/// gradient scaled by `weight` into `seed`.
fn log_softmax_grad(
    row: &[f64],
    label: usize,
    smoothing: f64,
    weight: f64,
    seed: &mut [f64],
) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lse = max + z.ln();
    let floor = smoothing / row.len() as f64;
    let mut loss = 0.0;
    for (j, v) in row.iter().enumerate() {
        let p = (v - lse).exp();
        let q = floor + if j == label { 1.0 - smoothing } else { 0.0 };
        seed[j] = weight * (p - q);
        loss += q * (lse - v);
    }
    loss
}

fn classifier_batch(
    model: &ZooModel,
    batch: &[&Example],
    smoothing: f64,
) -> Result<(f64, Vec<f64>)> {
    let width = model.input_spec().feature_len().expect("classifier");
    let mut data = Vec::with_capacity(batch.len() * width);
    for e in batch {
        data.extend_from_slice(e.sample.features().expect("checked"));
    }
    let graph = net::build_batch(model, Matrix::from_vec(batch.len(), width, data)?, true);
    let logits = graph.tape.value(graph.logits);
    let mut seed = Matrix::zeros(logits.rows(), logits.cols());
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (i, e) in batch.iter().enumerate() {
        loss += w * log_softmax_grad(logits.row(i), e.label, smoothing, w, seed.row_mut(i));
    }
    let grads = graph.tape.backward(graph.logits, seed);
    Ok((
        loss,
        net::flatten_param_grads(&graph, &grads, model.checkpoint()),
    ))
}

/// Next-token targets of a prompt: the prompt shifted left with the label appended.
fn lm_targets(e: &Example) -> Vec<usize> {
    let ids = e.sample.token_ids().expect("checked");
    ids[1..].iter().copied().chain([e.label]).collect()
}

fn transformer_batch(model: &ZooModel, batch: &[&Example], smoothing: f64) -> (f64, Vec<f64>) {
    let positions: usize = batch.iter().map(|e| lm_targets(e).len()).sum();
    let w = 1.0 / positions as f64;
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for e in batch {
        let sample = Sample::tokens(e.sample.token_ids().expect("checked").to_vec());
        let graph = net::build(model, &sample, GradMode::Params);
        let logits = graph.tape.value(graph.logits);
        let mut seed = Matrix::zeros(logits.rows(), logits.cols());
        for (t, y) in lm_targets(e).into_iter().enumerate() {
            loss += w * log_softmax_grad(logits.row(t), y, smoothing, w, seed.row_mut(t));
        }
        let g = graph.tape.backward(graph.logits, seed);
        for (acc, v) in
            grad.iter_mut()
                .zip(net::flatten_param_grads(&graph, &g, model.checkpoint()))
        {
            *acc += v;
        }
    }
    (loss, grad)
}

/// Classification accuracy, or per-token next-symbol accuracy over every
/// position for the transformer. Ties go to the lowest class index.
pub fn accuracy(model: &ZooModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if model.arch().is_classifier() {
        let probs = forward_probs_batch(model, &data.samples())?;
        let hits = probs
            .iter()
            .zip(&data.examples)
            .filter(|(p, e)| p.argmax() == e.label)
            .count();
        return Ok(hits as f64 / data.len() as f64);
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for e in &data.examples {
        model.check_sample(&e.sample)?;
        let graph = net::build(model, &e.sample, GradMode::Nothing);
        let logits = graph.tape.value(graph.logits);
        for (t, y) in lm_targets(e).into_iter().enumerate() {
            hits += usize::from(ClassDistribution::from_logits(logits.row(t)).argmax() == y);
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Autoregressive sampling of `length` tokens after `prefix`.
pub fn generate(
    model: &ZooModel,
    prefix: &[usize],
    length: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_with(model, prefix, length, &mut rng)
}

pub fn generate_with(
    model: &ZooModel,
    prefix: &[usize],
    length: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let shape = model
        .transformer_shape()
        .ok_or_else(|| invalid("generation needs a tiny-transformer"))?;
    if prefix.len() + length > shape.context {
        return Err(invalid(format!(
            "prefix {} + {length} new tokens exceeds context {}",
            prefix.len(),
            shape.context
        )));
    }
    let mut seq = prefix.to_vec();
    for _ in 0..length {
        let dist = forward_probs(model, &Sample::tokens(seq.clone()))?;
        seq.push(sample_index(dist.probs(), rng));
    }
    Ok(seq)
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
