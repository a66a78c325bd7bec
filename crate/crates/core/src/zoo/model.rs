use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
use crate::error::{invalid, Error, Result};

/// Attention heads of the tiny transformer. Not recoverable from tensor
/// shapes, so it is fixed for the whole zoo.
pub const TRANSFORMER_HEADS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    SoftmaxRegression,
    MlpClassifier,
    VisionClassifier,
    TinyTransformer,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::SoftmaxRegression => "softmax-regression",
            Arch::MlpClassifier => "mlp-classifier",
            Arch::VisionClassifier => "vision-classifier",
            Arch::TinyTransformer => "tiny-transformer",
        }
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, Arch::TinyTransformer)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax-regression" | "softmax" => Ok(Arch::SoftmaxRegression),
            "mlp-classifier" | "mlp" => Ok(Arch::MlpClassifier),
            "vision-classifier" | "vision" => Ok(Arch::VisionClassifier),
            "tiny-transformer" | "transformer" => Ok(Arch::TinyTransformer),
            other => Err(invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Features {
        len: usize,
    },
    /// RGB grid, flattened row-major with interleaved channels.
    Pixels {
        width: usize,
        height: usize,
    },
    Tokens {
        vocab: usize,
        context: usize,
    },
}

impl InputSpec {
    pub fn feature_len(&self) -> Option<usize> {
        match *self {
            InputSpec::Features { len } => Some(len),
            InputSpec::Pixels { width, height } => Some(width * height * 3),
            InputSpec::Tokens { .. } => None,
        }
    }
}

/// One model input.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    /// Feature vector or flattened image.
    Features(Vec<f64>),
    /// Token prompt; `shift` is added to every token embedding.
    Tokens {
        ids: Vec<usize>,
        shift: Option<Vec<f64>>,
    },
}

impl Sample {
    pub fn tokens(ids: Vec<usize>) -> Self {
        Sample::Tokens { ids, shift: None }
    }

    pub fn features(&self) -> Option<&[f64]> {
        match self {
            Sample::Features(x) => Some(x),
            Sample::Tokens { .. } => None,
        }
    }

    pub fn token_ids(&self) -> Option<&[usize]> {
        match self {
            Sample::Tokens { ids, .. } => Some(ids),
            Sample::Features(_) => None,
        }
    }
}

/// Geometry of a classifier: widths from input to classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpShape {
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub ff: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooModel {
    arch: Arch,
    class_count: usize,
    input_spec: InputSpec,
    checkpoint: Checkpoint,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    arch: Arch,
    class_count: usize,
    tensors: Checkpoint,
}

impl ZooModel {
    pub fn new(arch: Arch, class_count: usize, checkpoint: Checkpoint) -> Result<Self> {
        checkpoint.validate()?;
        if class_count < 2 {
            return Err(invalid("class_count must be at least 2"));
        }
        let input_spec = if arch.is_classifier() {
            let shape = mlp_shape(&checkpoint)?;
            if *shape.widths.last().expect("nonempty") != class_count {
                return Err(invalid("output width differs from class_count"));
            }
            let input = shape.widths[0];
            match arch {
                Arch::SoftmaxRegression if shape.widths.len() != 2 => {
                    return Err(invalid("softmax-regression has exactly one layer"))
                }
                Arch::VisionClassifier => {
                    let side = ((input / 3) as f64).sqrt().round() as usize;
                    if side * side * 3 != input {
                        return Err(invalid("vision input must be a square RGB grid"));
                    }
                    InputSpec::Pixels {
                        width: side,
                        height: side,
                    }
                }
                _ => InputSpec::Features { len: input },
            }
        } else {
            let shape = transformer_shape(&checkpoint)?;
            if shape.vocab != class_count {
                return Err(invalid(
                    "transformer class_count must equal vocabulary size",
                ));
            }
            InputSpec::Tokens {
                vocab: shape.vocab,
                context: shape.context,
            }
        };
        Ok(Self {
            arch,
            class_count,
            input_spec,
            checkpoint,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_spec(&self) -> InputSpec {
        self.input_spec
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn param_count(&self) -> usize {
        self.checkpoint.total_len()
    }

    pub fn with_checkpoint(&self, checkpoint: Checkpoint) -> Result<Self> {
        self.checkpoint.ensure_aligned(&checkpoint)?;
        Self::new(self.arch, self.class_count, checkpoint)
    }

    pub fn mlp_shape(&self) -> Option<MlpShape> {
        self.arch
            .is_classifier()
            .then(|| mlp_shape(&self.checkpoint).expect("validated"))
    }

    pub fn transformer_shape(&self) -> Option<TransformerShape> {
        (!self.arch.is_classifier())
            .then(|| transformer_shape(&self.checkpoint).expect("validated"))
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.transformer_shape().map(|s| s.d_model)
    }

    pub fn check_sample(&self, sample: &Sample) -> Result<()> {
        match (self.input_spec, sample) {
            (InputSpec::Tokens { vocab, context }, Sample::Tokens { ids, shift }) => {
                if ids.is_empty() {
                    return Err(invalid("empty token prompt"));
                }
                if ids.len() > context {
                    return Err(invalid(format!(
                        "prompt of {} tokens exceeds context {context}",
                        ids.len()
                    )));
                }
                if let Some(bad) = ids.iter().find(|&&t| t >= vocab) {
                    return Err(invalid(format!("token {bad} outside vocabulary {vocab}")));
                }
                if let Some(s) = shift {
                    let d = self.embedding_dim().expect("transformer");
                    if s.len() != d {
                        return Err(invalid("embedding shift has wrong width"));
                    }
                }
                Ok(())
            }
            (spec, Sample::Features(x)) if spec.feature_len() == Some(x.len()) => {
                if x.iter().all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(invalid("non-finite input"))
                }
            }
            _ => Err(invalid(format!(
                "sample does not match {} input",
                self.arch
            ))),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ModelFile {
            format: CHECKPOINT_FORMAT.to_string(),
            arch: self.arch,
            class_count: self.class_count,
            tensors: self.checkpoint.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelFile = serde_json::from_str(text)?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(invalid(format!(
                "unsupported checkpoint format '{}'",
                doc.format
            )));
        }
        Self::new(doc.arch, doc.class_count, doc.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn layer_names(i: usize) -> (String, String) {
    (format!("l{i}.weight"), format!("l{i}.bias"))
}

fn mlp_shape(ckpt: &Checkpoint) -> Result<MlpShape> {
    let mut widths = Vec::new();
    let mut i = 0;
    loop {
        let (w, b) = layer_names(i);
        let Some(wt) = ckpt.get(&w) else { break };
        if wt.shape.len() != 2 {
            return Err(invalid(format!("{w} must be 2-d")));
        }
        let (fan_in, fan_out) = (wt.shape[0], wt.shape[1]);
        if widths.is_empty() {
            widths.push(fan_in);
        } else if *widths.last().expect("nonempty") != fan_in {
            return Err(invalid(format!("{w} input width mismatch")));
        }
        match ckpt.get(&b) {
            Some(bt) if bt.shape == vec![fan_out] => {}
            _ => return Err(invalid(format!("{b} missing or mis-shaped"))),
        }
        widths.push(fan_out);
        i += 1;
    }
    if widths.len() < 2 {
        return Err(invalid("classifier checkpoint has no layers"));
    }
    if ckpt.tensors().len() != 2 * i {
        return Err(invalid("classifier checkpoint has unexpected tensors"));
    }
    Ok(MlpShape { widths })
}

pub(crate) fn transformer_shape(ckpt: &Checkpoint) -> Result<TransformerShape> {
    let shape_of = |name: &str| -> Result<&[usize]> {
        ckpt.get(name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| invalid(format!("transformer checkpoint lacks {name}")))
    };
    let tok = shape_of("tok_emb")?;
    let pos = shape_of("pos_emb")?;
    if tok.len() != 2 || pos.len() != 2 || tok[1] != pos[1] {
        return Err(invalid("embedding tables mis-shaped"));
    }
    let (vocab, d_model, context) = (tok[0], tok[1], pos[0]);
    if d_model % TRANSFORMER_HEADS != 0 {
        return Err(invalid("d_model must divide into heads"));
    }
    let mut layers = 0;
    while ckpt.get(&format!("h{layers}.ln1.g")).is_some() {
        layers += 1;
    }
    let ff = shape_of("h0.mlp.w1").map(|s| s[1]).unwrap_or(4 * d_model);
    let expect = |name: String, want: Vec<usize>| -> Result<()> {
        let got = shape_of(&name)?;
        if got != want.as_slice() {
            return Err(invalid(format!("{name}: shape {got:?}, expected {want:?}")));
        }
        Ok(())
    };
    for l in 0..layers {
        for ln in ["ln1", "ln2"] {
            expect(format!("h{l}.{ln}.g"), vec![d_model])?;
            expect(format!("h{l}.{ln}.b"), vec![d_model])?;
        }
        for w in ["wq", "wk", "wv", "wo"] {
            expect(format!("h{l}.attn.{w}"), vec![d_model, d_model])?;
        }
        expect(format!("h{l}.mlp.w1"), vec![d_model, ff])?;
        expect(format!("h{l}.mlp.b1"), vec![ff])?;
        expect(format!("h{l}.mlp.w2"), vec![ff, d_model])?;
        expect(format!("h{l}.mlp.b2"), vec![d_model])?;
    }
    expect("lnf.g".into(), vec![d_model])?;
    expect("lnf.b".into(), vec![d_model])?;
    expect("head.w".into(), vec![d_model, vocab])?;
    expect("head.b".into(), vec![vocab])?;
    if ckpt.tensors().len() != 6 + 12 * layers {
        return Err(invalid("transformer checkpoint has unexpected tensors"));
    }
    Ok(TransformerShape {
        vocab,
        d_model,
        layers,
        heads: TRANSFORMER_HEADS,
        context,
        ff,
    })
}
