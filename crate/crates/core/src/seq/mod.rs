//! Monte-Carlo FI for autoregressive generation.
//!
//! FI_l is the FI of the next-token prediction after l − 1 sampled tokens,
//! averaged over N sampled continuations of the prompt. The fixed-horizon
//! aggregate is (1/L)·Σ_{l=1..L} FI_l; the discounted aggregate is
//! (1 − γ)·Σ_{l≥0} γˡ·FI_{l+1}, so its first term is the FI at the prompt.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fi::fi_for_prediction;
use crate::zoo::train::sample_index;
use crate::zoo::{
    forward_probs, scores_and_probs, ClassDistribution, PerturbationTarget, Sample, ZooModel,
};

/// Cut-off weight of the discounted sum.
pub const DISCOUNT_CUTOFF: f64 = 1e-6;
pub const DEFAULT_L_MAX: usize = 256;
pub const DEFAULT_HORIZON: usize = 5;
pub const DEFAULT_SAMPLES: usize = 10;

/// What sequence FI needs from a generator.
pub trait Autoregressive: Sync {
    /// Longest context the model accepts.
    fn context(&self) -> usize;

    fn next_distribution(&self, context: &[usize]) -> Result<ClassDistribution>;

    /// FI of −log P(y_pred | context) with y_pred the argmax token.
    fn step_fi(&self, context: &[usize], target: &PerturbationTarget) -> Result<f64>;
}

impl Autoregressive for ZooModel {
    fn context(&self) -> usize {
        self.transformer_shape().map_or(0, |s| s.context)
    }

    fn next_distribution(&self, context: &[usize]) -> Result<ClassDistribution> {
        forward_probs(self, &Sample::tokens(context.to_vec()))
    }

    fn step_fi(&self, context: &[usize], target: &PerturbationTarget) -> Result<f64> {
        let (scores, probs) = scores_and_probs(self, &Sample::tokens(context.to_vec()), target)?;
        Ok(fi_for_prediction(&scores, &probs, probs.argmax())?.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenFi {
    pub l: usize,
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SeqMode {
    Fixed { horizon: usize },
    Discounted { gamma: f64, l_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqFiEstimate {
    pub per_token: Vec<TokenFi>,
    pub aggregate: f64,
    pub mode: SeqMode,
    /// Discount weight left out by truncation; 0 in fixed mode.
    pub truncation_mass: f64,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// FI after `generated` sampled tokens, over `samples` continuations drawn
/// from stream `generated + 1` of `seed`.
fn token_fi_after<M: Autoregressive + ?Sized>(
    model: &M,
    prompt: &[usize],
    generated: usize,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
) -> Result<TokenFi> {
    if samples == 0 {
        return Err(invalid("sequence FI needs at least one sample"));
    }
    if prompt.is_empty() {
        return Err(invalid("sequence FI needs a nonempty prompt"));
    }
    if prompt.len() + generated > model.context() {
        return Err(invalid(format!(
            "prompt {} + {generated} generated tokens exceeds context {}",
            prompt.len(),
            model.context()
        )));
    }
    let l = generated + 1;
    if generated == 0 {
        let v = model.step_fi(prompt, target)?;
        return Ok(TokenFi {
            l,
            mean: v,
            stderr: 0.0,
            samples,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(l as u64);
    let mut contexts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut ctx = prompt.to_vec();
        for _ in 0..generated {
            let dist = model.next_distribution(&ctx)?;
            ctx.push(sample_index(dist.probs(), &mut rng));
        }
        contexts.push(ctx);
    }
    let values: Vec<f64> = contexts
        .par_iter()
        .map(|c| model.step_fi(c, target))
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_stderr(&values);
    Ok(TokenFi {
        l,
        mean,
        stderr,
        samples,
    })
}

/// Monte-Carlo FI_l: mean and standard error over `samples` continuations of
/// length l − 1.
pub fn fi_token_mc<M: Autoregressive + ?Sized>(
    model: &M,
    prompt: &[usize],
    l: usize,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
) -> Result<TokenFi> {
    if l == 0 {
        return Err(invalid("token index l starts at 1"));
    }
    token_fi_after(model, prompt, l - 1, target, samples, seed)
}

pub fn fi_seq_fixed<M: Autoregressive + ?Sized>(
    model: &M,
    prompt: &[usize],
    horizon: usize,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
) -> Result<SeqFiEstimate> {
    if horizon == 0 {
        return Err(invalid("horizon L must be at least 1"));
    }
    let per_token: Vec<TokenFi> = (1..=horizon)
        .map(|l| fi_token_mc(model, prompt, l, target, samples, seed))
        .collect::<Result<_>>()?;
    let aggregate = per_token.iter().map(|t| t.mean).sum::<f64>() / horizon as f64;
    Ok(SeqFiEstimate {
        per_token,
        aggregate,
        mode: SeqMode::Fixed { horizon },
        truncation_mass: 0.0,
    })
}

/// Terms kept by the discounted sum: stops at `l_max` or once γˡ drops
/// below the cut-off.
pub fn discount_terms(gamma: f64, l_max: usize) -> usize {
    let mut n = 0;
    let mut w = 1.0;
    while n < l_max && w >= DISCOUNT_CUTOFF {
        n += 1;
        w *= gamma;
    }
    n
}

pub fn fi_seq_discounted<M: Autoregressive + ?Sized>(
    model: &M,
    prompt: &[usize],
    gamma: f64,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
    l_max: usize,
) -> Result<SeqFiEstimate> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("discount γ = {gamma} outside [0, 1)")));
    }
    if l_max == 0 {
        return Err(invalid("l_max must be at least 1"));
    }
    let n = discount_terms(gamma, l_max);
    let per_token: Vec<TokenFi> = (0..n)
        .map(|l| token_fi_after(model, prompt, l, target, samples, seed))
        .collect::<Result<_>>()?;
    let mut aggregate = 0.0;
    let mut w = 1.0;
    for t in &per_token {
        aggregate += (1.0 - gamma) * w * t.mean;
        w *= gamma;
    }
    Ok(SeqFiEstimate {
        per_token,
        aggregate,
        mode: SeqMode::Discounted { gamma, l_max },
        truncation_mass: w,
    })
}

pub fn fi_seq<M: Autoregressive + ?Sized>(
    model: &M,
    prompt: &[usize],
    mode: SeqMode,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
) -> Result<SeqFiEstimate> {
    match mode {
        SeqMode::Fixed { horizon } => fi_seq_fixed(model, prompt, horizon, target, samples, seed),
        SeqMode::Discounted { gamma, l_max } => {
            fi_seq_discounted(model, prompt, gamma, target, samples, seed, l_max)
        }
    }
}

/// Mean aggregate over prompts; every prompt uses the same seed.
pub fn fi_dataset_mean<M: Autoregressive + ?Sized>(
    model: &M,
    prompts: &[Vec<usize>],
    mode: SeqMode,
    target: &PerturbationTarget,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(invalid("no prompts"));
    }
    let aggregates: Vec<f64> = prompts
        .par_iter()
        .map(|p| fi_seq(model, p, mode, target, samples, seed).map(|e| e.aggregate))
        .collect::<Result<_>>()?;
    Ok(aggregates.iter().sum::<f64>() / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::TargetKind;

    /// Uniform next-token distribution; FI depends on context length only.
    struct Scripted {
        fi: fn(usize) -> f64,
    }

    impl Autoregressive for Scripted {
        fn context(&self) -> usize {
            400
        }

        fn next_distribution(&self, _: &[usize]) -> Result<ClassDistribution> {
            Ok(ClassDistribution::from_probs(vec![0.25; 4]))
        }

        fn step_fi(&self, context: &[usize], _: &PerturbationTarget) -> Result<f64> {
            Ok((self.fi)(context.len()))
        }
    }

    fn target() -> PerturbationTarget {
        PerturbationTarget::new(TargetKind::EmbeddingDim, vec![0])
    }

    #[test]
    fn discount_term_counts() {
        assert_eq!(discount_terms(0.0, 256), 1);
        assert_eq!(discount_terms(0.5, 256), 20);
        assert_eq!(discount_terms(0.99, 256), 256);
        assert_eq!(discount_terms(0.5, 3), 3);
    }

    #[test]
    fn constant_sequences() {
        let m = Scripted { fi: |_| 2.5 };
        let fixed = fi_seq_fixed(&m, &[1], 5, &target(), 3, 0).unwrap();
        assert!((fixed.aggregate - 2.5).abs() < 1e-12);
        for gamma in [0.0, 0.5, 0.9] {
            let d = fi_seq_discounted(&m, &[1], gamma, &target(), 2, 0, DEFAULT_L_MAX).unwrap();
            assert!(
                (d.aggregate - 2.5).abs() <= 1e-5 * 2.5,
                "γ={gamma}: {}",
                d.aggregate
            );
            assert!((d.aggregate + 2.5 * d.truncation_mass - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn first_token_is_deterministic() {
        let m = Scripted { fi: |n| n as f64 };
        let t = fi_token_mc(&m, &[1, 2], 1, &target(), 10, 4).unwrap();
        assert_eq!((t.mean, t.stderr, t.samples), (2.0, 0.0, 10));
        let d = fi_seq_discounted(&m, &[1, 2], 0.0, &target(), 10, 4, 256).unwrap();
        assert_eq!(d.aggregate, 2.0);
    }

    #[test]
    fn validation() {
        let m = Scripted { fi: |_| 1.0 };
        assert!(fi_token_mc(&m, &[1], 0, &target(), 1, 0).is_err());
        assert!(fi_seq_fixed(&m, &[1], 0, &target(), 1, 0).is_err());
        assert!(fi_seq_discounted(&m, &[1], 1.0, &target(), 1, 0, 10).is_err());
        assert!(fi_token_mc(&m, &[1; 400], 2, &target(), 1, 0).is_err());
        assert!(fi_dataset_mean(&m, &[], SeqMode::Fixed { horizon: 1 }, &target(), 1, 0).is_err());
    }
}
