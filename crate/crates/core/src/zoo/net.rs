//! Forward graphs of the zoo architectures on the autodiff tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, Tensor};
use super::model::{layer_names, Sample, ZooModel};
use crate::autodiff::{Tape, Var};
use crate::linalg::Matrix;

/// Which leaves of the graph receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradMode {
    Nothing,
    Params,
    Input,
    Embedding,
}

pub(crate) struct Graph {
    pub tape: Tape,
    /// rows × classes; classifiers have one row per batch item, the
    /// transformer one row per position.
    pub logits: Var,
    /// One leaf per checkpoint tensor, in name order.
    pub params: Vec<Var>,
    pub input: Option<Var>,
    pub shift: Option<Var>,
}

fn tensor_matrix(t: &Tensor) -> Matrix {
    match t.shape.as_slice() {
        [r, c] => Matrix::from_vec(*r, *c, t.data.clone()).expect("validated shape"),
        _ => Matrix::row_vector(t.data.clone()),
    }
}

fn param_leaves(tape: &mut Tape, ckpt: &Checkpoint, grad: bool) -> (Vec<Var>, Vec<String>) {
    let mut vars = Vec::new();
    let mut names = Vec::new();
    for (name, t) in ckpt.tensors() {
        let m = tensor_matrix(t);
        vars.push(if grad { tape.leaf(m) } else { tape.constant(m) });
        names.push(name.clone());
    }
    (vars, names)
}

struct Params<'a> {
    vars: &'a [Var],
    names: &'a [String],
}

impl Params<'_> {
    fn get(&self, name: &str) -> Var {
        let i = self
            .names
            .binary_search_by(|n| n.as_str().cmp(name))
            .unwrap_or_else(|_| panic!("missing tensor {name}"));
        self.vars[i]
    }
}

/// Graph for a single sample. Assumes the sample was checked against the model.
pub(crate) fn build(model: &ZooModel, sample: &Sample, mode: GradMode) -> Graph {
    let mut tape = Tape::new();
    let (vars, names) = param_leaves(&mut tape, model.checkpoint(), mode == GradMode::Params);
    let params = Params {
        vars: &vars,
        names: &names,
    };
    let (logits, input, shift) = match sample {
        Sample::Features(x) => {
            let m = Matrix::row_vector(x.clone());
            let input = if mode == GradMode::Input {
                tape.leaf(m)
            } else {
                tape.constant(m)
            };
            let logits = mlp_logits(&mut tape, &params, input);
            (logits, Some(input), None)
        }
        Sample::Tokens { ids, shift } => {
            let d = model.embedding_dim().expect("transformer");
            let shift_value = Matrix::row_vector(shift.clone().unwrap_or_else(|| vec![0.0; d]));
            let shift_var = if mode == GradMode::Embedding {
                Some(tape.leaf(shift_value))
            } else if shift.is_some() {
                Some(tape.constant(shift_value))
            } else {
                None
            };
            let layers = model.transformer_shape().expect("transformer");
            let logits = transformer_logits(
                &mut tape,
                &params,
                ids,
                shift_var,
                layers.layers,
                layers.heads,
            );
            (logits, None, shift_var)
        }
    };
    Graph {
        tape,
        logits,
        params: vars,
        input,
        shift,
    }
}

/// Classifier graph over a batch (rows of `inputs`), input never differentiated.
pub(crate) fn build_batch(model: &ZooModel, inputs: Matrix, param_grad: bool) -> Graph {
    let mut tape = Tape::new();
    let (vars, names) = param_leaves(&mut tape, model.checkpoint(), param_grad);
    let params = Params {
        vars: &vars,
        names: &names,
    };
    let input = tape.constant(inputs);
    let logits = mlp_logits(&mut tape, &params, input);
    Graph {
        tape,
        logits,
        params: vars,
        input: Some(input),
        shift: None,
    }
}

fn mlp_logits(tape: &mut Tape, params: &Params, x: Var) -> Var {
    let layers = params.names.len() / 2;
    let mut h = x;
    for i in 0..layers {
        let (w, b) = layer_names(i);
        let z = tape.matmul(h, params.get(&w));
        let z = tape.add_row(z, params.get(&b));
        h = if i + 1 < layers { tape.tanh(z) } else { z };
    }
    h
}

fn transformer_logits(
    tape: &mut Tape,
    params: &Params,
    ids: &[usize],
    shift: Option<Var>,
    layers: usize,
    heads: usize,
) -> Var {
    let t = ids.len();
    let mut emb = tape.gather(params.get("tok_emb"), ids);
    if let Some(s) = shift {
        emb = tape.add_row(emb, s);
    }
    let positions: Vec<usize> = (0..t).collect();
    let pos = tape.gather(params.get("pos_emb"), &positions);
    let mut x = tape.add(emb, pos);
    let d = tape.value(x).cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..layers {
        let p = |s: &str| params.get(&format!("h{l}.{s}"));
        let a = tape.layer_norm(x, p("ln1.g"), p("ln1.b"));
        let q = tape.matmul(a, p("attn.wq"));
        let k = tape.matmul(a, p("attn.wk"));
        let v = tape.matmul(a, p("attn.wv"));
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let s = tape.scale(s, scale);
            let att = tape.causal_softmax(s);
            outs.push(tape.matmul(att, vh));
        }
        let o = tape.concat_cols(&outs);
        let o = tape.matmul(o, p("attn.wo"));
        x = tape.add(x, o);
        let m = tape.layer_norm(x, p("ln2.g"), p("ln2.b"));
        let f = tape.matmul(m, p("mlp.w1"));
        let f = tape.add_row(f, p("mlp.b1"));
        let f = tape.tanh(f);
        let f = tape.matmul(f, p("mlp.w2"));
        let f = tape.add_row(f, p("mlp.b2"));
        x = tape.add(x, f);
    }
    let x = tape.layer_norm(x, params.get("lnf.g"), params.get("lnf.b"));
    let logits = tape.matmul(x, params.get("head.w"));
    tape.add_row(logits, params.get("head.b"))
}

/// Flatten per-tensor gradients (name order) into the checkpoint index space.
pub(crate) fn flatten_param_grads(
    graph: &Graph,
    grads: &crate::autodiff::Gradients,
    ckpt: &Checkpoint,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(ckpt.total_len());
    for (var, t) in graph.params.iter().zip(ckpt.tensors().values()) {
        match grads.get(*var) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    out
}

/// Glorot-uniform weights and zero biases for a classifier.
pub fn init_mlp(widths: &[usize], rng: &mut impl Rng) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let (w, b) = layer_names(i);
        ckpt.insert(w, Tensor::new(vec![fan_in, fan_out], data).expect("shape"));
        ckpt.insert(b, Tensor::zeros(vec![fan_out]));
    }
    ckpt
}

/// Small-normal initialisation for the transformer; layer-norm gains start at 1.
pub fn init_transformer(
    vocab: usize,
    d_model: usize,
    layers: usize,
    context: usize,
    rng: &mut impl Rng,
) -> Checkpoint {
    let ff = 4 * d_model;
    let normal = Normal::new(0.0, 0.02).expect("valid");
    let proj = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("valid");
    let mut ckpt = Checkpoint::new();
    let gauss = |shape: Vec<usize>, dist: &Normal<f64>, rng: &mut dyn rand::RngCore| {
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::new(shape, data).expect("shape")
    };
    ckpt.insert("tok_emb", gauss(vec![vocab, d_model], &proj, rng));
    ckpt.insert("pos_emb", gauss(vec![context, d_model], &normal, rng));
    let ones = |n| Tensor::new(vec![n], vec![1.0; n]).expect("shape");
    for l in 0..layers {
        ckpt.insert(format!("h{l}.ln1.g"), ones(d_model));
        ckpt.insert(format!("h{l}.ln1.b"), Tensor::zeros(vec![d_model]));
        ckpt.insert(format!("h{l}.ln2.g"), ones(d_model));
        ckpt.insert(format!("h{l}.ln2.b"), Tensor::zeros(vec![d_model]));
        for w in ["wq", "wk", "wv", "wo"] {
            ckpt.insert(
                format!("h{l}.attn.{w}"),
                gauss(vec![d_model, d_model], &proj, rng),
            );
        }
        let ff_in = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("valid");
        let ff_out = Normal::new(0.0, 1.0 / (ff as f64).sqrt()).expect("valid");
        ckpt.insert(
            format!("h{l}.mlp.w1"),
            gauss(vec![d_model, ff], &ff_in, rng),
        );
        ckpt.insert(format!("h{l}.mlp.b1"), Tensor::zeros(vec![ff]));
        ckpt.insert(
            format!("h{l}.mlp.w2"),
            gauss(vec![ff, d_model], &ff_out, rng),
        );
        ckpt.insert(format!("h{l}.mlp.b2"), Tensor::zeros(vec![d_model]));
    }
    ckpt.insert("lnf.g", ones(d_model));
    ckpt.insert("lnf.b", Tensor::zeros(vec![d_model]));
    ckpt.insert("head.w", gauss(vec![d_model, vocab], &proj, rng));
    ckpt.insert("head.b", Tensor::zeros(vec![vocab]));
    ckpt
}
