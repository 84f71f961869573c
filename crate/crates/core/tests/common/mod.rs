//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use platescope::assignment::{balance_heuristic, balance_oracle, log_objective, ProbabilityMatrix};
use platescope::autodiff::{Tape, Tensor, Var};
use platescope::losses::{self, ArcFaceConfig};
use platescope::model::{self, BackboneConfig};
use platescope::plate_data::{DatasetManifest, PlateKey, Split};
use platescope::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal entries pushed at least `gap` away from zero, so kinks at
/// zero stay out of reach of the finite-difference step.
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Scalar `Σ out ⊙ R` for a fixed random `R`, so every output entry
/// contributes to the checked gradient.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(randn(&shape, &mut rng(seed ^ 0x5eed)));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn evaluate(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input entry.
pub fn gradcheck(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
    pub build: Box<dyn Fn(u64) -> Build>,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(u64) -> Build + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

/// Builds `Σ f(inputs) ⊙ R` for an op `f` with a tensor output.
fn reduce(f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'static) -> impl Fn(u64) -> Build {
    move |seed| {
        let f = f.clone();
        Box::new(move |tape: &mut Tape, v: &[Var]| {
            let out = f(tape, v)?;
            weighted_sum(tape, out, seed)
        })
    }
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        case(
            "conv2d",
            |r| vec![randn(&[2, 3, 5, 5], r), randn(&[4, 3, 3, 3], r)],
            reduce(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        ),
        case(
            "conv2d_strided",
            |r| vec![randn(&[2, 2, 6, 6], r), randn(&[3, 2, 3, 3], r)],
            reduce(|t, v| t.conv2d(v[0], v[1], 2, 0)),
        ),
        case(
            "depthwise_conv2d",
            |r| vec![randn(&[2, 3, 5, 5], r), randn(&[3, 1, 3, 3], r)],
            reduce(|t, v| t.depthwise_conv2d(v[0], v[1], 2, 1)),
        ),
        case(
            "depthwise_separable_conv",
            |r| vec![randn(&[2, 3, 5, 5], r), randn(&[3, 1, 3, 3], r), randn(&[4, 3, 1, 1], r)],
            reduce(|t, v| t.depthwise_separable_conv(v[0], v[1], v[2], 1, 1)),
        ),
        case(
            "matmul",
            |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)],
            reduce(|t, v| t.matmul(v[0], v[1])),
        ),
        case(
            "dense",
            |r| vec![randn(&[3, 4], r), randn(&[4, 2], r), randn(&[2], r)],
            reduce(|t, v| t.dense(v[0], v[1], Some(v[2]))),
        ),
        case(
            "dense_no_bias",
            |r| vec![randn(&[3, 4], r), randn(&[4, 2], r)],
            reduce(|t, v| t.dense(v[0], v[1], None)),
        ),
        case(
            "add_row_bias",
            |r| vec![randn(&[3, 4], r), randn(&[4], r)],
            reduce(|t, v| t.add_row_bias(v[0], v[1])),
        ),
        case(
            "add_channel_bias",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r)],
            reduce(|t, v| t.add_channel_bias(v[0], v[1])),
        ),
        case("add", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], reduce(|t, v| t.add(v[0], v[1]))),
        case("sub", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], reduce(|t, v| t.sub(v[0], v[1]))),
        case("mul", |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)], reduce(|t, v| t.mul(v[0], v[1]))),
        case("scale", |r| vec![randn(&[3, 4], r)], reduce(|t, v| Ok(t.scale(v[0], -1.7)))),
        case(
            "relu",
            |r| vec![randn_away_from_zero(&[4, 5], 1e-3, r)],
            reduce(|t, v| Ok(t.relu(v[0]))),
        ),
        case("log", |r| vec![uniform(&[3, 4], 0.2, 3.0, r)], reduce(|t, v| Ok(t.log(v[0])))),
        case(
            "mean_pool2d",
            |r| vec![randn(&[2, 2, 4, 6], r)],
            reduce(|t, v| t.mean_pool2d(v[0], 2)),
        ),
        case(
            "global_mean_pool",
            |r| vec![randn(&[2, 3, 3, 3], r)],
            reduce(|t, v| t.global_mean_pool(v[0])),
        ),
        case(
            "l2_normalize_rows",
            |r| vec![randn(&[3, 4], r)],
            reduce(|t, v| t.l2_normalize_rows(v[0])),
        ),
        case("transpose", |r| vec![randn(&[3, 4], r)], reduce(|t, v| t.transpose(v[0]))),
        case("softmax_rows", |r| vec![randn(&[3, 5], r)], reduce(|t, v| t.softmax_rows(v[0]))),
        case(
            "log_softmax_rows",
            |r| vec![randn(&[3, 5], r)],
            reduce(|t, v| t.log_softmax_rows(v[0])),
        ),
        case("sum", |r| vec![randn(&[3, 4], r)], |_| Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sum(v[0])))),
        case("mean", |r| vec![randn(&[3, 4], r)], |_| Box::new(|t: &mut Tape, v: &[Var]| Ok(t.mean(v[0])))),
        case(
            "concat_rows",
            |r| vec![randn(&[2, 3], r), randn(&[1, 3], r), randn(&[3, 3], r)],
            reduce(|t, v| t.concat_rows(v)),
        ),
        case(
            "slice_rows",
            |r| vec![randn(&[5, 3], r)],
            reduce(|t, v| t.slice_rows(v[0], 1, 4)),
        ),
        case(
            "angular_margin",
            |r| vec![uniform(&[4, 5], -0.95, 0.95, r)],
            |seed| {
                let y = labels(4, 5, &mut rng(seed));
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let out = t.angular_margin(v[0], &y, 0.3, losses::COS_CLAMP_EPS)?;
                    weighted_sum(t, out, seed)
                })
            },
        ),
        case(
            "nll_masked",
            |r| vec![randn(&[5, 4], r)],
            |seed| {
                let mut r = rng(seed);
                let y = labels(5, 4, &mut r);
                let mask: Vec<bool> = (0..5).map(|i| i == 0 || r.random_bool(0.6)).collect();
                Box::new(move |t: &mut Tape, v: &[Var]| t.nll_masked(v[0], &y, &mask))
            },
        ),
    ]
}

/// Every loss, differentiated with respect to all of its trainable inputs.
pub fn loss_cases() -> Vec<GradCase> {
    vec![
        case(
            "arcface_loss",
            |r| vec![randn(&[4, 6], r), randn(&[6, 5], r)],
            |seed| {
                let y = labels(4, 5, &mut rng(seed));
                let cfg = ArcFaceConfig::new(8.0, 0.3, 5).unwrap();
                Box::new(move |t: &mut Tape, v: &[Var]| losses::arcface_loss(t, v[0], v[1], &y, &cfg))
            },
        ),
        case(
            "arcface_loss_no_margin",
            |r| vec![randn(&[4, 6], r), randn(&[6, 5], r)],
            |seed| {
                let y = labels(4, 5, &mut rng(seed));
                let cfg = ArcFaceConfig::new(30.0, 0.0, 5).unwrap();
                Box::new(move |t: &mut Tape, v: &[Var]| losses::arcface_loss(t, v[0], v[1], &y, &cfg))
            },
        ),
        case(
            "cosine_logits",
            |r| vec![randn(&[3, 4], r), randn(&[4, 5], r)],
            reduce(|t, v| losses::cosine_logits(t, v[0], v[1], 4.0)),
        ),
        case(
            "softmax_ce_loss",
            |r| vec![randn(&[4, 5], r)],
            |seed| {
                let y = labels(4, 5, &mut rng(seed));
                Box::new(move |t: &mut Tape, v: &[Var]| losses::softmax_ce_loss(t, v[0], &y))
            },
        ),
        case(
            "consistency_loss",
            |r| vec![randn(&[4, 5], r)],
            |seed| {
                // the teacher side is detached inside the loss, so it is not an input here
                let teacher = randn(&[4, 5], &mut rng(seed ^ 0x7eac));
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let s = t.softmax_rows(v[0])?;
                    let tl = t.leaf(teacher.clone());
                    let te = t.softmax_rows(tl)?;
                    losses::consistency_loss(t, s, te)
                })
            },
        ),
        case(
            "pseudo_label_loss",
            |r| vec![randn(&[5, 4], r)],
            |seed| {
                let mut r = rng(seed);
                let y = labels(5, 4, &mut r);
                let mask: Vec<bool> = (0..5).map(|i| i == 1 || r.random_bool(0.5)).collect();
                Box::new(move |t: &mut Tape, v: &[Var]| losses::pseudo_label_loss(t, v[0], &y, &mask))
            },
        ),
    ]
}

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        input_channels: 2,
        stem_channels: 3,
        num_blocks: 2,
        width_multiplier: 1.0,
        embedding_dim: 4,
        num_classes: 3,
    }
}

/// Gradient of a full backbone + ArcFace head with respect to every parameter.
pub fn model_case() -> GradCase {
    case(
        "backbone_arcface",
        |r| {
            let seed = r.random();
            let params = model::build(&tiny_backbone(), seed).unwrap();
            let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
            inputs.push(randn(&[2, 2, 6, 6], r));
            inputs
        },
        |seed| {
            let names: Vec<String> = model::build(&tiny_backbone(), 0).unwrap().names().cloned().collect();
            let y = labels(2, 3, &mut rng(seed));
            let cfg = ArcFaceConfig::new(4.0, 0.2, 3).unwrap();
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let vars: model::ParamVars = names.iter().cloned().zip(v.iter().copied()).collect();
                let x = *v.last().unwrap();
                let e = model::forward(t, &vars, x)?;
                losses::arcface_loss(t, e, vars[model::CLASS_WEIGHT], &y, &cfg)
            })
        },
    )
}

/// Worst error of `case` over `seeds` seeds.
pub fn worst_over_seeds(case: &GradCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|s| {
            let inputs = (case.inputs)(&mut rng(s));
            gradcheck(&(case.build)(s), &inputs)
        })
        .fold(0.0, f64::max)
}

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Row-stochastic `n × n` matrix: softmax of Gaussian scores at `temperature`.
pub fn random_probabilities(n: usize, temperature: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for _ in 0..n {
        let scores: Vec<f64> = (0..n).map(|_| gauss(rng) / temperature).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exp.iter().sum();
        out.extend(exp.iter().map(|e| e / z));
    }
    out
}

pub fn probability_matrix(n: usize, temperature: f64, seed: u64) -> ProbabilityMatrix {
    let mut r = rng(seed);
    let probs = random_probabilities(n, temperature, &mut r);
    ProbabilityMatrix::new(
        PlateKey { experiment: 0, plate: 0 },
        (0..n as u32).collect(),
        (0..n).collect(),
        probs,
    )
    .unwrap()
}

/// Noisy classifier output for every test well: softmax over classes of
/// `signal · onehot(true) + N(0, 1)`.
pub fn noisy_predictions(manifest: &DatasetManifest, signal: f64, seed: u64) -> BTreeMap<u32, Vec<f64>> {
    let mut r = rng(seed);
    let k = manifest.num_classes as usize;
    manifest
        .records_in(Split::Test)
        .map(|rec| {
            let y = rec.true_label().unwrap();
            let s: Vec<f64> = (0..k).map(|j| gauss(&mut r) + if j == y { signal } else { 0.0 }).collect();
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z: f64 = exp.iter().sum();
            (rec.image_index, exp.iter().map(|e| e / z).collect())
        })
        .collect()
}

/// Heuristic log-probability regret relative to the optimum, per instance.
pub fn relative_regret(pm: &ProbabilityMatrix) -> f64 {
    let best = log_objective(pm, &balance_oracle(pm).unwrap());
    let heur = log_objective(pm, &balance_heuristic(pm).unwrap());
    (best - heur) / best.abs().max(1e-12)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean cross-entropy of `s · cos(e_i, w_j)` logits, computed without the tape.
pub fn reference_cosine_ce(emb: &Tensor, w: &Tensor, labels: &[usize], s: f64) -> f64 {
    let (n, d) = (emb.shape()[0], emb.shape()[1]);
    let k = w.shape()[1];
    let col_norm: Vec<f64> = (0..k)
        .map(|j| (0..d).map(|r| w.data()[r * k + j].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        let e = emb.row(i);
        let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..k)
            .map(|j| s * (0..d).map(|r| e[r] * w.data()[r * k + j]).sum::<f64>() / (en * col_norm[j]))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[labels[i]];
    }
    total / n as f64
}

pub fn arcface_value(emb: &Tensor, w: &Tensor, labels: &[usize], cfg: &ArcFaceConfig) -> f64 {
    let mut tape = Tape::new();
    let e = tape.leaf(emb.clone());
    let wv = tape.leaf(w.clone());
    let l = losses::arcface_loss(&mut tape, e, wv, labels, cfg).unwrap();
    tape.value(l).item()
}

/// `|ArcFace(m = 0) − reference|` on one random instance.
pub fn zero_margin_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, k) = (r.random_range(1..6), r.random_range(2..8), r.random_range(2..7));
    let emb = randn(&[n, d], &mut r);
    let w = randn(&[d, k], &mut r);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let s = r.random_range(1.0..30.0);
    let cfg = ArcFaceConfig::new(s, 0.0, k).unwrap();
    (arcface_value(&emb, &w, &labels, &cfg) - reference_cosine_ce(&emb, &w, &labels, s)).abs()
}
