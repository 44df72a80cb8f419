//! Finite-difference gradient suite shared by the gradient tests and the
//! acceptance run.

#![allow(dead_code)]

use qumab::model::{forward_on_tape, init_model, total_loss, ModelConfig, ModelParams, Variant};
use qumab::numkernel::gradcheck::{central_jacobian, tape_jacobian};
use qumab::numkernel::{
    finite_diff_check, finite_diff_check_with_oracle, relative_error, Scalar, Tape, Tensor, Var,
};
use qumab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OPS: [&str; 18] = [
    "matmul",
    "transpose",
    "add",
    "mul",
    "add_bias",
    "scale",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "sum",
    "add_all",
    "slice_cols",
    "concat_cols",
    "slice_rows",
    "concat_rows",
    "mean_rows",
    "reshape",
];

pub const TOL32: f64 = 1e-3;
pub const TOL64: f64 = 1e-5;
/// Larger than the op step: model losses are smooth and their smallest
/// gradient entries drown in roundoff at small steps.
const MODEL_H: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradResult {
    pub name: String,
    pub instances: usize,
    pub worst32: f64,
    pub worst64: f64,
    /// Instances over either tolerance.
    pub failing: usize,
    /// Worst 32-bit absolute error divided by the largest gradient entry of
    /// the same tensor.
    pub worst32_scaled: f64,
}

impl GradResult {
    pub fn passes(&self) -> bool {
        self.worst32 < TOL32 && self.worst64 < TOL64
    }
}

/// One random instance: the differentiated input, constant operands, and
/// which operand slot the input occupies.
#[derive(Debug, Clone)]
struct Case {
    x: Tensor<f64>,
    consts: Vec<Tensor<f64>>,
    weights: Tensor<f64>,
    slot: usize,
    rows: usize,
    cols: usize,
    extra: usize,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    // Round through f32 so both precisions see identical inputs.
    Tensor::new(shape, data.iter().map(|&v| v as f32 as f64).collect()).unwrap()
}

fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let rows = rng.random_range(1..4);
    let cols = rng.random_range(1..5);
    let extra = rng.random_range(1..4);
    let slot = rng.random_range(0..3);
    let m = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, &[r, c], 1.0);
    let (x, consts, out_shape): (Tensor<f64>, Vec<Tensor<f64>>, Vec<usize>) = match op {
        "matmul" => {
            let (a, b) = (m(rng, rows, cols), m(rng, cols, extra));
            if slot % 2 == 0 { (a, vec![b], vec![rows, extra]) } else { (b, vec![a], vec![rows, extra]) }
        }
        "transpose" => (m(rng, rows, cols), vec![], vec![cols, rows]),
        "add" | "mul" => (m(rng, rows, cols), vec![m(rng, rows, cols)], vec![rows, cols]),
        "add_bias" => {
            let (x, b) = (m(rng, rows, cols), m(rng, 1, cols).reshape(&[cols]).unwrap());
            if slot % 2 == 0 { (x, vec![b], vec![rows, cols]) } else { (b, vec![x], vec![rows, cols]) }
        }
        "layer_norm" => {
            // Two columns normalise to ±1 whatever x is, leaving only
            // eps-sized gradients.
            let cols = cols + 2;
            let (x, g, b) = (rand_tensor(rng, &[rows, cols], 2.0), m(rng, 1, cols), m(rng, 1, cols));
            let (g, b) = (g.reshape(&[cols]).unwrap(), b.reshape(&[cols]).unwrap());
            let parts = [x, g, b];
            let x = parts[slot].clone();
            let mut rest = parts.to_vec();
            rest.remove(slot);
            (x, rest, vec![rows, cols])
        }
        "softmax" => (rand_tensor(rng, &[rows, cols], 3.0), vec![], vec![rows, cols]),
        "gelu" => (rand_tensor(rng, &[rows, cols], 3.0), vec![], vec![rows, cols]),
        "cross_entropy" => (rand_tensor(rng, &[1, cols + 1], 3.0), vec![], vec![1]),
        "sum" | "add_all" => (m(rng, rows, cols), vec![m(rng, rows, cols)], vec![1]),
        "slice_cols" => (m(rng, rows, cols + extra), vec![], vec![rows, cols]),
        "concat_cols" => (m(rng, rows, cols), vec![m(rng, rows, extra)], vec![rows, cols + extra]),
        "slice_rows" => (m(rng, rows + extra, cols), vec![], vec![rows, cols]),
        "concat_rows" => (m(rng, rows, cols), vec![m(rng, extra, cols)], vec![rows + extra, cols]),
        "mean_rows" => (m(rng, rows, cols), vec![], vec![1, cols]),
        "reshape" => (m(rng, rows, cols), vec![], vec![cols * rows]),
        _ => (m(rng, rows, cols), vec![], vec![rows, cols]),
    };
    let scale_case = op == "scale";
    let weights = rand_tensor(rng, &out_shape, 1.0);
    Case {
        x,
        consts,
        weights,
        slot,
        rows,
        cols,
        extra: if scale_case { rng.random_range(1..5) } else { extra },
    }
}

/// Builds `Σ w ⊙ op(...)` with `x` in the operand slot the case names.
fn build<T: Scalar>(op: &str, c: &Case, tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let consts: Vec<Var> = c
        .consts
        .iter()
        .map(|t| tape.constant(&t.cast::<T>()))
        .collect::<Result<_>>()?;
    let k = |i: usize| consts[i];
    let y = match op {
        "matmul" => {
            if c.slot.is_multiple_of(2) { tape.matmul(x, k(0))? } else { tape.matmul(k(0), x)? }
        }
        "transpose" => tape.transpose(x)?,
        "add" => tape.add(x, k(0))?,
        "mul" => {
            // Also exercise a shared operand.
            let a = tape.mul(x, k(0))?;
            let b = tape.mul(x, x)?;
            tape.add(a, b)?
        }
        "add_bias" => {
            if c.slot.is_multiple_of(2) { tape.add_bias(x, k(0))? } else { tape.add_bias(k(0), x)? }
        }
        "scale" => tape.scale(x, T::from_f64(0.5 * c.extra as f64 - 1.25))?,
        "softmax" => tape.softmax_lastdim(x)?,
        "layer_norm" => {
            let mut parts = vec![k(0), k(1)];
            parts.insert(c.slot, x);
            tape.layer_norm(parts[0], parts[1], parts[2], 1e-5)?
        }
        "gelu" => tape.gelu(x)?,
        "cross_entropy" => tape.cross_entropy(x, c.extra % c.x.len())?,
        "sum" => {
            let p = tape.mul(x, k(0))?;
            tape.sum(p)?
        }
        "add_all" => {
            let p = tape.mul(x, k(0))?;
            let (a, b) = (tape.sum(p)?, tape.sum(x)?);
            let sq = tape.mul(a, a)?;
            tape.add_all(&[a, b, sq])?
        }
        "slice_cols" => tape.slice_cols(x, c.extra.min(c.x.shape()[1] - c.cols), c.cols)?,
        "concat_cols" => {
            if c.slot.is_multiple_of(2) { tape.concat_cols(&[x, k(0)])? } else { tape.concat_cols(&[k(0), x])? }
        }
        "slice_rows" => tape.slice_rows(x, c.extra.min(c.x.shape()[0] - c.rows), c.rows)?,
        "concat_rows" => {
            if c.slot.is_multiple_of(2) { tape.concat_rows(&[x, k(0)])? } else { tape.concat_rows(&[k(0), x])? }
        }
        "mean_rows" => tape.mean_rows(x)?,
        "reshape" => tape.reshape(x, &[c.cols * c.rows])?,
        other => panic!("unknown op {other}"),
    };
    let w = tape.constant(&c.weights.cast::<T>())?;
    let w = if tape.shape(w) == tape.shape(y) { w } else { tape.reshape(w, &tape.shape(y).to_vec())? };
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn op_suite(op: &str, instances: usize, seed: u64) -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst32, mut worst64, mut failing) = (0.0f64, 0.0f64, 0);
    for _ in 0..instances {
        let c = case(op, &mut rng);
        let e64 = finite_diff_check(|t, v| build::<f64>(op, &c, t, v), &c.x, 1e-3)
            .unwrap_or_else(|e| panic!("{op}: {e}"));
        let e32 = finite_diff_check_with_oracle(
            |t, v| build::<f32>(op, &c, t, v),
            |t, v| build::<f64>(op, &c, t, v),
            &c.x.cast::<f32>(),
            1e-3,
        )
        .unwrap_or_else(|e| panic!("{op}: {e}"));
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
        failing += usize::from(e32 >= TOL32 || e64 >= TOL64);
    }
    GradResult {
        name: op.to_string(),
        instances,
        worst32,
        worst64,
        failing,
        worst32_scaled: worst32,
    }
}

fn randomize<T: Scalar>(p: &mut ModelParams<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for param in p.params_mut() {
        for v in param.tensor.data_mut() {
            *v = T::from_f64(rng.random_range(-scale..scale) as f32 as f64);
        }
    }
}

fn loss_wrt<'a, T: Scalar>(
    p: &'a ModelParams<T>,
    index: usize,
    x: &'a Tensor<T>,
    labels: &'a [Option<usize>],
) -> impl Fn(&mut Tape<T>, Var) -> Result<Var> + 'a {
    move |tape, v| {
        let mut vars = p.register(tape, false)?;
        vars[index] = v;
        let pass = forward_on_tape(tape, p, &vars, x, false)?;
        total_loss(tape, pass.logits, labels)
    }
}

/// Random tiny models over every variant and both input modes; each
/// instance checks the loss gradient with respect to one random parameter
/// tensor.
pub fn model_suite(instances: usize, seed: u64) -> GradResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst32, mut worst64, mut failing) = (0.0f64, 0.0f64, 0);
    let mut worst32_scaled = 0.0f64;
    for i in 0..instances {
        let variant = Variant::ALL[i % Variant::ALL.len()];
        let sequence = (i / Variant::ALL.len()) % 2 == 1;
        let n_ann = rng.random_range(1..4);
        let n_classes = rng.random_range(2..4);
        let mut cfg = ModelConfig::new(n_ann, n_classes, 3).with_variant(variant);
        cfg.hidden_dim = 8;
        cfg.n_heads = 2;
        cfg.n_blocks = rng.random_range(1..3);
        cfg.classifier_hidden = 4;
        let shape = if sequence {
            cfg.max_frames = 3;
            cfg.n_compression_queries = 2;
            vec![rng.random_range(1..4), 2, 3]
        } else {
            vec![rng.random_range(1..4), 3]
        };
        let mut p64 = init_model::<f64>(&cfg, i as u64).unwrap();
        randomize(&mut p64, &mut rng, 0.5);
        let p32 = p64.cast::<f32>();
        let x64 = rand_tensor(&mut rng, &shape, 1.0);
        let x32 = x64.cast::<f32>();
        let mut labels: Vec<Option<usize>> =
            (0..n_ann).map(|_| rng.random_bool(0.7).then(|| rng.random_range(0..n_classes))).collect();
        if labels.iter().all(Option::is_none) {
            labels[0] = Some(0);
        }
        let index = rng.random_range(0..p64.params().len());
        let t64 = p64.params()[index].tensor.clone();
        let f64_loss = loss_wrt(&p64, index, &x64, &labels);
        let numeric = central_jacobian(&f64_loss, &t64, MODEL_H).unwrap();
        let ana64 = tape_jacobian(&f64_loss, &t64).unwrap();
        let ana32 = tape_jacobian(&loss_wrt(&p32, index, &x32, &labels), &p32.params()[index].tensor).unwrap();
        let (numeric, ana64, ana32) = (&numeric[0], &ana64[0], &ana32[0]);
        let e64 = worst(ana64, numeric);
        let e32 = worst(ana32, numeric);
        let scale = numeric.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        let abs32 = ana32.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst32_scaled = worst32_scaled.max(abs32 / scale);
        worst64 = worst64.max(e64);
        worst32 = worst32.max(e32);
        failing += usize::from(e32 >= TOL32 || e64 >= TOL64);
    }
    GradResult {
        name: "model_loss".into(),
        instances,
        worst32,
        worst64,
        failing,
        worst32_scaled,
    }
}

fn worst(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}
