//! Finite-difference verification of every differentiable operation.
//!
//! Each case is a small program over a list of input tensors. The scalar
//! under test is `Σ wᵢ·yᵢ` for the program output `y` and fixed random
//! weights `w`; a plain sum would hide errors in ops whose outputs sum to a
//! constant (softmax rows, normalised vectors). Central differences are
//! always evaluated in `f64` on the same generic program, so the `f32` check
//! compares single-precision analytic gradients against a reference that is
//! not itself limited by single-precision rounding.
//!
//! The error reported per case is normwise over all inputs:
//! `‖g_analytic − g_numeric‖∞ / max(‖g_numeric‖∞, 1e-8)`.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::contrastive::{info_nce, total_contrastive_loss, ProjectionHead};
use crate::error::{Error, Result};
use crate::fusion::{attention, DecoderBlock, MlpClassifier};
use crate::numerics::{Bound, ParamSet, Real, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Central-difference step.
    pub fn step(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-6,
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-7,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}` (expected f32 or f64)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub precision: Precision,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// One step of a randomly composed program. Every value in the pool has the
/// same `[rows × cols]` shape.
#[derive(Debug, Clone, Copy)]
enum Step {
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Softmax(usize, usize),
    LayerNorm(usize),
    Project(usize),
    NormalizeRows(usize),
    SplitJoin(usize, usize),
}

#[derive(Debug, Clone)]
enum Program {
    MatMul,
    Elementwise,
    Relu,
    Softmax,
    LayerNorm,
    Cosine,
    CrossEntropy(Vec<usize>),
    Structural,
    InfoNce,
    Dropout(u64),
    Attention { heads: usize },
    DecoderBlock { block: DecoderBlock, params: usize, heads: usize },
    Contrastive { heads: [ProjectionHead; 3], params: usize },
    Mlp { mlp: MlpClassifier, params: usize, labels: Vec<usize> },
    Random { steps: Vec<Step>, pool: usize },
}

/// A named program and its inputs (stored in `f64`).
#[derive(Debug, Clone)]
pub struct Case {
    pub name: String,
    program: Program,
    inputs: Vec<Tensor<f64>>,
    weight_seed: u64,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Tensor::new(shape, data).expect("gaussian shape")
}

/// Values with magnitude in `[0.1, 1]`, so ReLU never sits at its kink
/// within a difference step.
fn off_kink<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("off_kink shape")
}

fn params_f64(p: &ParamSet<f32>) -> Vec<Tensor<f64>> {
    p.values().iter().map(|t| t.cast()).collect()
}

impl Case {
    fn new(name: &str, program: Program, inputs: Vec<Tensor<f64>>, weight_seed: u64) -> Self {
        Self {
            name: name.to_string(),
            program,
            inputs,
            weight_seed,
        }
    }

    pub fn scalars(&self) -> usize {
        self.inputs.iter().map(Tensor::len).sum()
    }

    fn build<T: Real>(&self, tape: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        match &self.program {
            Program::MatMul => {
                let y = tape.matmul(x[0], x[1])?;
                let t = tape.transpose(x[0])?;
                let z = tape.matmul(t, y)?;
                tape.reshape(z, &[flat_len(tape, z)])
            }
            Program::Elementwise => {
                let s = tape.add(x[0], x[1])?;
                let p = tape.mul(s, x[2])?;
                let r = tape.add_row(p, x[3])?;
                let c = tape.mul(r, x[4])?;
                tape.scale(c, T::of(-1.5))
            }
            Program::Relu => tape.relu(x[0]),
            Program::Softmax => {
                let a = tape.softmax(x[0], 1)?;
                let b = tape.softmax(x[0], 0)?;
                let c = tape.softmax(x[1], 0)?;
                let ab = tape.concat_rows(&[a, b])?;
                let cr = tape.reshape(c, &[1, 4])?;
                tape.concat_rows(&[ab, cr])
            }
            Program::LayerNorm => tape.layernorm(x[0], x[1], x[2]),
            Program::Cosine => {
                let c = tape.cosine_similarity(x[0], x[1])?;
                let n = tape.normalize_rows(x[2])?;
                let s = tape.sum(n)?;
                let both = tape.add(c, s)?;
                tape.reshape(both, &[1])
            }
            Program::CrossEntropy(labels) => tape.cross_entropy(x[0], labels),
            Program::Structural => {
                let t = tape.transpose(x[0])?;
                let a = tape.slice_cols(t, 1, 2)?;
                let b = tape.slice_rows(x[1], 0, 3)?;
                let ab = tape.concat_cols(&[a, b])?;
                let m = tape.mean_rows(ab)?;
                let r = tape.reshape(ab, &[2, 6])?;
                let mean = tape.mean(r)?;
                let scaled = tape.mul(r, mean)?;
                let flat = tape.reshape(scaled, &[12])?;
                let sum = tape.sum(x[1])?;
                let sum = tape.reshape(sum, &[1])?;
                tape.concat_cols(&[m, flat, sum])
            }
            Program::InfoNce => {
                let a = info_nce(tape, x[0], x[1], x[2], false)?;
                let b = info_nce(tape, x[0], x[1], x[2], true)?;
                let ab = tape.scale(b, T::of(0.7))?;
                tape.add(a, ab)
            }
            Program::Dropout(seed) => {
                let mut r = rng::stream(*seed, "gradcheck-dropout", 0);
                let d = tape.dropout(x[0], 0.4, &mut r, true)?;
                tape.mul(d, x[1])
            }
            Program::Attention { heads } => {
                let (out, weights) = attention(tape, x[0], x[1], x[2], *heads)?;
                let w = tape.concat_cols(&weights)?;
                let w = tape.scale(w, T::of(3.0))?;
                let wr = tape.reshape(w, &[flat_len(tape, w)])?;
                let o = tape.reshape(out, &[flat_len(tape, out)])?;
                tape.concat_cols(&[o, wr])
            }
            Program::DecoderBlock { block, params, heads } => {
                let p = Bound::from_vars(x[..*params].to_vec());
                let mut r = rng::stream(0, "unused", 0);
                block.forward(tape, &p, x[*params], x[*params + 1], *heads, 0.0, false, &mut r)
            }
            Program::Contrastive { heads, params } => {
                let p = Bound::from_vars(x[..*params].to_vec());
                let mut projected = Vec::with_capacity(3);
                for (i, h) in heads.iter().enumerate() {
                    projected.push(h.forward(tape, &p, x[*params + i])?);
                }
                let projected: [Var; 3] = projected.try_into().expect("three heads");
                let inv_tau = x[*params + 3];
                let a = total_contrastive_loss(tape, projected, inv_tau, false)?;
                let b = total_contrastive_loss(tape, projected, inv_tau, true)?;
                let mut parts = Vec::with_capacity(5);
                for v in [a.tv, a.va, a.at, a.total, b.total] {
                    parts.push(tape.reshape(v, &[1])?);
                }
                tape.concat_cols(&parts)
            }
            Program::Mlp { mlp, params, labels } => {
                let p = Bound::from_vars(x[..*params].to_vec());
                let mut r = rng::stream(0, "unused", 0);
                let logits = mlp.forward(tape, &p, x[*params], false, &mut r)?;
                tape.cross_entropy(logits, labels)
            }
            Program::Random { steps, pool } => {
                // Inputs: the pool, then a [c × c] projection, then LN gain and bias.
                let mut vals: Vec<Var> = x[..*pool].to_vec();
                let (w, gain, bias) = (x[*pool], x[*pool + 1], x[*pool + 2]);
                for step in steps {
                    let v = match *step {
                        Step::Add(i, j) => tape.add(vals[i], vals[j])?,
                        Step::Mul(i, j) => tape.mul(vals[i], vals[j])?,
                        Step::Scale(i, c) => tape.scale(vals[i], T::of(c))?,
                        Step::Softmax(i, axis) => tape.softmax(vals[i], axis)?,
                        Step::LayerNorm(i) => tape.layernorm(vals[i], gain, bias)?,
                        Step::Project(i) => tape.matmul(vals[i], w)?,
                        Step::NormalizeRows(i) => tape.normalize_rows(vals[i])?,
                        Step::SplitJoin(i, k) => {
                            let c = tape.value(vals[i]).last_dim();
                            let a = tape.slice_cols(vals[i], 0, k)?;
                            let b = tape.slice_cols(vals[i], k, c - k)?;
                            tape.concat_cols(&[b, a])?
                        }
                    };
                    vals.push(v);
                }
                tape.concat_rows(&vals)
            }
        }
    }

    /// `Σ w·y` and, when asked, the gradient with respect to every input.
    fn evaluate<T: Real>(&self, inputs: &[Tensor<f64>], grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::<T>::new();
        let vars = inputs
            .iter()
            .map(|t| tape.leaf(t.cast(), grads))
            .collect::<Result<Vec<_>>>()?;
        let y = self.build(&mut tape, &vars)?;
        let shape = tape.value(y).shape().to_vec();
        let mut wr = rng::stream(self.weight_seed, "gradcheck-weights", 0);
        let w = gaussian(&mut wr, &shape, 1.0);
        let wv = tape.constant(w.cast())?;
        let yw = tape.mul(y, wv)?;
        let loss = tape.sum(yw)?;
        let value = tape.value(loss).item().as_f64();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let out = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| match g.take(v) {
                Some(gt) => gt.cast(),
                None => Tensor::zeros(t.shape()),
            })
            .collect();
        Ok((value, out))
    }

    /// Analytic gradients in `precision` against `f64` central differences.
    pub fn check(&self, precision: Precision) -> Result<CheckResult> {
        // Both sides must see the same point, so round it to f32 first.
        let inputs: Vec<Tensor<f64>> = match precision {
            Precision::F32 => self.inputs.iter().map(|t| t.cast::<f32>().cast()).collect(),
            Precision::F64 => self.inputs.clone(),
        };
        let analytic = match precision {
            Precision::F32 => self.evaluate::<f32>(&inputs, true)?.1,
            Precision::F64 => self.evaluate::<f64>(&inputs, true)?.1,
        };
        let h = precision.step();
        let mut work = inputs.clone();
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let x0 = input.data()[i];
                work[k].data_mut()[i] = x0 + h;
                let up = self.evaluate::<f64>(&work, false)?.0;
                work[k].data_mut()[i] = x0 - h;
                let down = self.evaluate::<f64>(&work, false)?.0;
                work[k].data_mut()[i] = x0;
                let numeric = (up - down) / (2.0 * h);
                diff = diff.max((analytic[k].data()[i] - numeric).abs());
                scale = scale.max(numeric.abs());
            }
        }
        let err = diff / scale.max(1e-8);
        let tolerance = precision.tolerance();
        Ok(CheckResult {
            name: self.name.clone(),
            precision,
            scalars: self.scalars(),
            max_rel_error: err,
            tolerance,
            passed: err <= tolerance,
        })
    }
}

fn flat_len<T: Real>(tape: &Tape<T>, v: Var) -> usize {
    tape.value(v).len()
}

fn random_program(seed: u64, index: u64) -> Case {
    const ROWS: usize = 3;
    const COLS: usize = 4;
    const POOL: usize = 3;
    let mut r = rng::stream(seed, "gradcheck-program", index);
    let mut inputs: Vec<Tensor<f64>> = (0..POOL).map(|_| gaussian(&mut r, &[ROWS, COLS], 0.8)).collect();
    inputs.push(gaussian(&mut r, &[COLS, COLS], 0.5));
    inputs.push(gaussian(&mut r, &[COLS], 0.3).map(|v| v + 1.0));
    inputs.push(gaussian(&mut r, &[COLS], 0.3));
    let kinds = ["add", "mul", "scale", "softmax", "layernorm", "project", "normalize", "split"];
    let mut steps = Vec::new();
    let count = r.random_range(5..9);
    for live in POOL..POOL + count {
        let i = r.random_range(0..live);
        let j = r.random_range(0..live);
        let step = match *kinds.choose(&mut r).expect("non-empty") {
            "add" => Step::Add(i, j),
            "mul" => Step::Mul(i, j),
            "scale" => Step::Scale(i, r.random_range(-2.0..2.0)),
            "softmax" => Step::Softmax(i, r.random_range(0..2)),
            "layernorm" => Step::LayerNorm(i),
            "project" => Step::Project(i),
            "normalize" => Step::NormalizeRows(i),
            _ => Step::SplitJoin(i, r.random_range(1..COLS)),
        };
        steps.push(step);
    }
    Case::new(
        &format!("random_program_{index}"),
        Program::Random { steps, pool: POOL },
        inputs,
        seed ^ (0x100 + index),
    )
}

/// The registered cases: every primitive, the composite losses and layers,
/// and `random` randomly composed programs.
pub fn cases(seed: u64, random: usize) -> Vec<Case> {
    let mut r = rng::stream(seed, "gradcheck-inputs", 0);
    let mut out = vec![
        Case::new(
            "matmul",
            Program::MatMul,
            vec![gaussian(&mut r, &[3, 4], 1.0), gaussian(&mut r, &[4, 5], 1.0)],
            seed,
        ),
        Case::new(
            "add_mul_scale",
            Program::Elementwise,
            vec![
                gaussian(&mut r, &[3, 4], 1.0),
                gaussian(&mut r, &[3, 4], 1.0),
                gaussian(&mut r, &[3, 4], 1.0),
                gaussian(&mut r, &[4], 1.0),
                gaussian(&mut r, &[1], 1.0),
            ],
            seed + 1,
        ),
        Case::new("relu", Program::Relu, vec![off_kink(&mut r, &[4, 5])], seed + 2),
        Case::new(
            "softmax",
            Program::Softmax,
            vec![gaussian(&mut r, &[3, 4], 1.5), gaussian(&mut r, &[4], 1.5)],
            seed + 3,
        ),
        Case::new(
            "layernorm",
            Program::LayerNorm,
            vec![
                gaussian(&mut r, &[4, 6], 1.0),
                gaussian(&mut r, &[6], 0.3).map(|v| v + 1.0),
                gaussian(&mut r, &[6], 0.3),
            ],
            seed + 4,
        ),
        Case::new(
            "cosine",
            Program::Cosine,
            vec![gaussian(&mut r, &[5], 1.0), gaussian(&mut r, &[5], 1.0), gaussian(&mut r, &[3, 4], 1.0)],
            seed + 5,
        ),
        Case::new(
            "cross_entropy",
            Program::CrossEntropy(vec![2, 0, 3, 3, 1]),
            vec![gaussian(&mut r, &[5, 4], 1.5)],
            seed + 6,
        ),
        Case::new(
            "structural",
            Program::Structural,
            vec![gaussian(&mut r, &[4, 3], 1.0), gaussian(&mut r, &[5, 2], 1.0)],
            seed + 7,
        ),
        Case::new(
            "info_nce",
            Program::InfoNce,
            vec![
                gaussian(&mut r, &[4, 3], 1.0),
                gaussian(&mut r, &[4, 3], 1.0),
                Tensor::scalar(2.5),
            ],
            seed + 8,
        ),
        Case::new(
            "dropout",
            Program::Dropout(seed),
            vec![gaussian(&mut r, &[4, 5], 1.0), gaussian(&mut r, &[4, 5], 1.0)],
            seed + 9,
        ),
        Case::new(
            "attention",
            Program::Attention { heads: 2 },
            vec![
                gaussian(&mut r, &[3, 4], 1.0),
                gaussian(&mut r, &[5, 4], 1.0),
                gaussian(&mut r, &[5, 4], 1.0),
            ],
            seed + 10,
        ),
    ];

    let mut p = ParamSet::new();
    let block = DecoderBlock::init(&mut p, "block", 8, 12, &mut r);
    let mut inputs = params_f64(&p);
    let params = inputs.len();
    // Small random LayerNorm gains and biases so their gradients are not trivial.
    for (name, t) in p.iter().zip(inputs.iter_mut()).map(|((n, _), t)| (n.to_string(), t)) {
        if name.ends_with(".bias") || name.ends_with(".gain") {
            let noise = gaussian(&mut r, t.shape(), 0.2);
            *t = Tensor::new(t.shape(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect()).unwrap();
        }
    }
    inputs.push(gaussian(&mut r, &[3, 8], 1.0));
    inputs.push(gaussian(&mut r, &[4, 8], 1.0));
    out.push(Case::new(
        "decoder_block",
        Program::DecoderBlock { block, params, heads: 2 },
        inputs,
        seed + 11,
    ));

    let mut p = ParamSet::new();
    let dims = [6, 5, 4];
    let heads = [0, 1, 2].map(|i| ProjectionHead::init(&mut p, &format!("head.{i}"), dims[i], 7, 3, &mut r));
    let mut inputs = params_f64(&p);
    let params = inputs.len();
    for (id, input) in p.ids().zip(inputs.iter_mut()) {
        if p.name(id).ends_with(".bias") {
            *input = gaussian(&mut r, input.shape(), 0.2);
        }
    }
    for d in dims {
        inputs.push(gaussian(&mut r, &[4, d], 1.0));
    }
    inputs.push(Tensor::scalar(3.0));
    out.push(Case::new(
        "projection_contrastive",
        Program::Contrastive { heads, params },
        inputs,
        seed + 12,
    ));

    let mut p = ParamSet::new();
    let mlp = MlpClassifier::init(&mut p, 6, [8, 5], 4, 0.0, &mut r);
    let mut inputs = params_f64(&p);
    let params = inputs.len();
    inputs.push(gaussian(&mut r, &[5, 6], 1.0));
    out.push(Case::new(
        "mlp_classifier",
        Program::Mlp {
            mlp,
            params,
            labels: vec![0, 3, 1, 2, 3],
        },
        inputs,
        seed + 13,
    ));

    out.extend((0..random as u64).map(|i| random_program(seed, i)));
    out
}

/// Default seed and random-program count used by the CLI and the
/// acceptance suite.
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_RANDOM_PROGRAMS: usize = 3;

/// Checks every registered case.
pub fn run_all(precision: Precision) -> Result<Vec<CheckResult>> {
    cases(DEFAULT_SEED, DEFAULT_RANDOM_PROGRAMS)
        .iter()
        .map(|c| c.check(precision))
        .collect()
}
