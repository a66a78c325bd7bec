//! Reference zoo: the fixed datasets, models and attack loops shared by the
//! acceptance suite and the command line.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::fi::{mean_stability_map, Measure, StabilityMap, TargetFamily};
use crate::harness::{embed_attack, mask_pixels, RankedUnits};
use crate::zoo::{
    accuracy, fine_tune, forward_probs, shapes, train_toy, Arch, BlobSpec, Checkpoint, Dataset,
    Example, Grammar, Sample, TrainConfig, ZooModel,
};

pub const VISION_CLASSES: usize = 8;
pub const GRAMMAR_VOCAB: usize = 16;
pub const GRAMMAR_LEN: usize = 12;
pub const GRAMMAR_CONTEXT: usize = 16;
pub const CALIBRATION_SAMPLES: usize = 64;

/// A trained model with the data it was fit on and a held-out split.
#[derive(Debug, Clone)]
pub struct Reference {
    pub model: ZooModel,
    pub train: Dataset,
    pub test: Dataset,
}

impl Reference {
    pub fn test_accuracy(&self) -> Result<f64> {
        accuracy(&self.model, &self.test)
    }

    pub fn calibration(&self) -> Vec<Sample> {
        self.train.take(CALIBRATION_SAMPLES).samples()
    }
}

pub fn blob_spec() -> BlobSpec {
    BlobSpec {
        dim: 16,
        classes: 8,
        radius: 3.0,
        spread: 1.0,
        centre_seed: 7,
    }
}

pub fn grammar() -> Grammar {
    Grammar::new(GRAMMAR_VOCAB, 7)
}

/// Training and held-out data of the reference model of `arch`: shapes for
/// the vision classifier, blobs for the other classifiers, the grammar for
/// the transformer.
pub fn reference_data(arch: Arch) -> Result<(Dataset, Dataset)> {
    Ok(match arch {
        Arch::VisionClassifier => (
            shapes(2000, VISION_CLASSES, 1)?,
            shapes(500, VISION_CLASSES, 2)?,
        ),
        Arch::MlpClassifier | Arch::SoftmaxRegression => {
            let spec = blob_spec();
            (spec.sample(2000, 1), spec.sample(1000, 2))
        }
        Arch::TinyTransformer => {
            let g = grammar();
            (g.sample(800, GRAMMAR_LEN, 1), g.sample(300, GRAMMAR_LEN, 2))
        }
    })
}

pub fn reference_config(arch: Arch) -> TrainConfig {
    let cfg = TrainConfig::for_arch(arch);
    match arch {
        Arch::TinyTransformer => TrainConfig {
            context: GRAMMAR_CONTEXT,
            ..cfg
        },
        _ => cfg,
    }
}

impl Reference {
    /// Train the reference model of `arch` with seed 0.
    pub fn train(arch: Arch) -> Result<Self> {
        let (train, test) = reference_data(arch)?;
        let model = train_toy(arch, &train, &reference_config(arch), 0)?.model;
        Ok(Self { model, train, test })
    }
}

fn hit(model: &ZooModel, sample: &Sample, label: usize) -> Result<usize> {
    Ok(usize::from(forward_probs(model, sample)?.argmax() == label))
}

/// Accuracy after masking the top `k` pixels of each image under the
/// ranking `rank(index, example)` returns.
pub fn masked_accuracy(
    model: &ZooModel,
    data: &Dataset,
    k: usize,
    mask_value: f64,
    rank: impl Fn(usize, &Example) -> Result<RankedUnits> + Sync,
) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let hits: usize = data
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let image = e
                .sample
                .features()
                .ok_or_else(|| invalid("pixel masking needs image samples"))?;
            let masked = mask_pixels(image, &rank(i, e)?, k, mask_value)?;
            hit(model, &Sample::Features(masked), e.label)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy after an embedding attack, with the prompts whose attack was
/// degenerate (zero gradient on the chosen dims) left unperturbed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackOutcome {
    pub accuracy: f64,
    pub degenerate: usize,
}

/// Next-token accuracy after an embedding attack on every prompt.
pub fn attacked_accuracy(
    model: &ZooModel,
    data: &Dataset,
    fraction: f64,
    epsilon: f64,
    rank: impl Fn(usize, &Example) -> Result<RankedUnits> + Sync,
) -> Result<AttackOutcome> {
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let per: Vec<(usize, usize)> = data
        .examples
        .par_iter()
        .enumerate()
        .map(
            |(i, e)| match embed_attack(model, &e.sample, &rank(i, e)?, fraction, epsilon) {
                Ok(attacked) => Ok((hit(model, &attacked, e.label)?, 0)),
                Err(Error::DegenerateAttack(_)) => Ok((hit(model, &e.sample, e.label)?, 1)),
                Err(err) => Err(err),
            },
        )
        .collect::<Result<_>>()?;
    Ok(AttackOutcome {
        accuracy: per.iter().map(|p| p.0).sum::<usize>() as f64 / data.len() as f64,
        degenerate: per.iter().map(|p| p.1).sum(),
    })
}

/// Seed of the random ranking for example `index` under arm `seed`.
pub fn random_stream(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub const TASK_DIM: usize = 8;
const TASK_NOISE: f64 = 0.3;

/// One domain of the two-task zoo: blobs living in `TASK_DIM` coordinates
/// starting at `offset`, noise elsewhere.
pub fn task_domain(n: usize, offset: usize, seed: u64, centre_seed: u64) -> Dataset {
    let spec = BlobSpec {
        dim: TASK_DIM,
        classes: 4,
        radius: 3.0,
        spread: 0.8,
        centre_seed,
    };
    let noise = Normal::new(0.0, TASK_NOISE).expect("valid sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let examples = spec
        .sample(n, seed)
        .examples
        .into_iter()
        .map(|e| {
            let mut x: Vec<f64> = (0..2 * TASK_DIM).map(|_| noise.sample(&mut rng)).collect();
            let own = e.sample.features().expect("blob features");
            x[offset..offset + TASK_DIM].copy_from_slice(own);
            Example {
                sample: Sample::Features(x),
                label: e.label,
            }
        })
        .collect();
    Dataset::new(examples)
}

/// Domain A of the two-task zoo: blobs in the first `TASK_DIM` features.
pub fn task_a(n: usize, seed: u64) -> Dataset {
    task_domain(n, 0, seed, 11)
}

/// Domain B: blobs in the last `TASK_DIM` features.
pub fn task_b(n: usize, seed: u64) -> Dataset {
    task_domain(n, TASK_DIM, seed, 12)
}

/// Shared base plus two fine-tunes on disjoint domains.
#[derive(Debug, Clone)]
pub struct TwoTask {
    pub base: ZooModel,
    pub a: ZooModel,
    pub b: ZooModel,
    pub train_a: Dataset,
    pub train_b: Dataset,
    pub val_a: Dataset,
    pub val_b: Dataset,
}

impl TwoTask {
    pub fn build(seed: u64) -> Result<Self> {
        let s = seed * 10;
        let train_a = task_a(1000, s + 1);
        let train_b = task_b(1000, s + 2);
        let val_a = task_a(500, s + 3);
        let val_b = task_b(500, s + 4);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::for_arch(Arch::MlpClassifier)
        };
        let warmup = train_a.take(200).concat(&train_b.take(200));
        let base = train_toy(Arch::MlpClassifier, &warmup, &cfg, seed)?.model;
        let ft = TrainConfig { epochs: 15, ..cfg };
        let a = fine_tune(&base, &train_a, &ft, seed + 1)?.model;
        let b = fine_tune(&base, &train_b, &ft, seed + 2)?.model;
        Ok(Self {
            base,
            a,
            b,
            train_a,
            train_b,
            val_a,
            val_b,
        })
    }

    /// Mean parameter FI of each fine-tune on its own domain.
    pub fn maps(&self) -> Result<(StabilityMap, StabilityMap)> {
        let map = |m: &ZooModel, d: &Dataset| {
            mean_stability_map(
                m,
                &d.take(CALIBRATION_SAMPLES).samples(),
                &TargetFamily::AllParams,
                Measure::Fi,
            )
        };
        Ok((map(&self.a, &self.train_a)?, map(&self.b, &self.train_b)?))
    }

    /// Validation accuracy of a merged checkpoint on both domains.
    pub fn score(&self, merged: &Checkpoint) -> Result<(f64, f64)> {
        let m = self.base.with_checkpoint(merged.clone())?;
        Ok((accuracy(&m, &self.val_a)?, accuracy(&m, &self.val_b)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_domains_are_disjoint() {
        let a = task_a(20, 1);
        let b = task_b(20, 2);
        let spread = |d: &Dataset, r: std::ops::Range<usize>| {
            let n = d.len() as f64;
            d.examples
                .iter()
                .map(|e| {
                    e.sample.features().unwrap()[r.clone()]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                })
                .sum::<f64>()
                / n
        };
        assert!(spread(&a, 0..8) > 4.0 * spread(&a, 8..16));
        assert!(spread(&b, 8..16) > 4.0 * spread(&b, 0..8));
        assert_eq!(a.examples, task_a(20, 1).examples);
    }

    #[test]
    fn attack_loops_reject_empty_data() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::for_arch(Arch::MlpClassifier)
        };
        let d = task_a(8, 1);
        let m = train_toy(Arch::MlpClassifier, &d, &cfg, 0).unwrap().model;
        let empty = Dataset::new(Vec::new());
        let none = |_: usize, _: &Example| -> Result<RankedUnits> { unreachable!() };
        assert!(masked_accuracy(&m, &empty, 1, 0.0, none).is_err());
        assert!(attacked_accuracy(&m, &empty, 0.1, 1.0, none).is_err());
    }
}
