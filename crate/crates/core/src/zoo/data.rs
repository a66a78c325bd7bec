//! Seeded synthetic datasets and the line-delimited dataset file format.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::Sample;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sample: Sample,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(skip_serializing_if = "Option::is_none")]
    x: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    y: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.examples.iter().map(|e| e.sample.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn max_label(&self) -> Option<usize> {
        self.examples.iter().map(|e| e.label).max()
    }

    pub fn take(&self, n: usize) -> Self {
        Self::new(self.examples.iter().take(n).cloned().collect())
    }

    pub fn concat(&self, other: &Self) -> Self {
        Self::new(
            self.examples
                .iter()
                .chain(&other.examples)
                .cloned()
                .collect(),
        )
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for e in &self.examples {
            let record = match &e.sample {
                Sample::Features(x) => Record {
                    x: Some(x.clone()),
                    tokens: None,
                    y: e.label,
                },
                Sample::Tokens { ids, .. } => Record {
                    x: None,
                    tokens: Some(ids.clone()),
                    y: e.label,
                },
            };
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)?;
            let sample = match (r.x, r.tokens) {
                (Some(x), None) => Sample::Features(x),
                (None, Some(t)) => Sample::tokens(t),
                _ => {
                    return Err(invalid(format!(
                        "dataset line {}: exactly one of \"x\" or \"tokens\" required",
                        n + 1
                    )))
                }
            };
            examples.push(Example { sample, label: r.y });
        }
        Ok(Self { examples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }
}

/// Isotropic Gaussian class blobs.
#[derive(Debug, Clone)]
pub struct BlobSpec {
    pub dim: usize,
    pub classes: usize,
    /// Distance of class centres from the origin.
    pub radius: f64,
    /// Per-coordinate standard deviation around a centre.
    pub spread: f64,
    /// Seed for the class centres; samples use their own seed.
    pub centre_seed: u64,
}

impl BlobSpec {
    pub fn centres(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.centre_seed);
        (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let n = crate::linalg::norm(&v);
                v.iter().map(|x| x / n * self.radius).collect()
            })
            .collect()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let centres = self.centres();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| {
                let label = i % self.classes;
                let x = centres[label]
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c + self.spread * z
                    })
                    .collect();
                Example {
                    sample: Sample::Features(x),
                    label,
                }
            })
            .collect();
        Dataset { examples }
    }
}

pub const SHAPE_SIDE: usize = 16;
pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "cross", "ring", "diamond", "saltire", "frame",
];

/// Procedural RGB shapes on a textured background, `classes` ≤ 8.
pub fn shapes(n: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&classes) {
        return Err(invalid(format!(
            "shape classes must be in 2..=8, got {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % classes;
            Example {
                sample: Sample::Features(render_shape(label, &mut rng)),
                label,
            }
        })
        .collect();
    Ok(Dataset { examples })
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let cheb = ax.max(ay);
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => cheb <= 0.8 * r,
        2 => {
            let (top, bottom) = (-0.85 * r, 0.85 * r);
            dy >= top && dy <= bottom && ax <= 0.95 * r * (dy - top) / (bottom - top)
        }
        3 => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        4 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        5 => ax + ay <= r,
        6 => (ax - ay).abs() <= 0.35 * r && cheb <= 0.85 * r,
        7 => cheb <= 0.85 * r && cheb >= 0.5 * r,
        _ => unreachable!("validated class"),
    }
}

fn render_shape(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = SHAPE_SIDE;
    let base: [f64; 3] = [
        rng.random_range(0.0..0.35),
        rng.random_range(0.0..0.35),
        rng.random_range(0.0..0.35),
    ];
    let colour: [f64; 3] = [
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
        rng.random_range(0.55..1.0),
    ];
    let (fx, fy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let cx = rng.random_range(5.5..10.5);
    let cy = rng.random_range(5.5..10.5);
    let r = rng.random_range(3.5..5.5);
    let mut img = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = inside(class, px - cx, py - cy, r);
            let stripe = 0.06 * (fx * px + fy * py + phase).sin();
            for c in 0..3 {
                let v = if hit {
                    colour[c]
                } else {
                    let noise: f64 = StandardNormal.sample(rng);
                    base[c] + stripe + 0.03 * noise
                };
                img.push(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// First-order regular grammar: every symbol has one dominant successor and
/// two minor ones.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub vocab: usize,
    successors: Vec<[usize; 3]>,
    weights: [f64; 3],
}

impl Grammar {
    pub fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..vocab).collect();
        perm.shuffle(&mut rng);
        let successors = (0..vocab)
            .map(|s| {
                let primary = perm[s];
                let mut pick = || loop {
                    let c = rng.random_range(0..vocab);
                    if c != primary {
                        break c;
                    }
                };
                let a = pick();
                let b = loop {
                    let c = pick();
                    if c != a {
                        break c;
                    }
                };
                [primary, a, b]
            })
            .collect();
        Self {
            vocab,
            successors,
            weights: [0.8, 0.1, 0.1],
        }
    }

    /// Deterministic cycle `s → (s + 1) mod vocab`.
    pub fn cycle(vocab: usize) -> Self {
        Self {
            vocab,
            successors: (0..vocab).map(|s| [(s + 1) % vocab; 3]).collect(),
            weights: [1.0, 0.0, 0.0],
        }
    }

    pub fn most_likely_next(&self, s: usize) -> usize {
        self.successors[s][0]
    }

    fn next(&self, s: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (succ, w) in self.successors[s].iter().zip(self.weights) {
            acc += w;
            if u < acc {
                return *succ;
            }
        }
        self.successors[s][0]
    }

    /// `n` sequences of `len + 1` symbols: `len` prompt tokens and the next one as label.
    pub fn sample(&self, n: usize, len: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|_| {
                let mut seq = vec![rng.random_range(0..self.vocab)];
                for _ in 0..len {
                    let s = self.next(*seq.last().expect("nonempty"), &mut rng);
                    seq.push(s);
                }
                let label = seq.pop().expect("len + 1 symbols");
                Example {
                    sample: Sample::tokens(seq),
                    label,
                }
            })
            .collect();
        Dataset { examples }
    }
}
