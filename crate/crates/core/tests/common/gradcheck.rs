//! Central-difference gradient checks for tape ops and whole models.

use pvgf_core::model::{CaptionModel, TrainExample};
use pvgf_core::parallel::Execution;
use pvgf_core::tensor::{Padding, Tape, Var};
use pvgf_core::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

pub type Input = (Vec<usize>, Vec<f64>);

fn weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed + n as u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn scalarize(tape: &mut Tape<'_>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(&shape, weights(tape.value(y).len()))?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn loss<F>(inputs: &[Input], f: &F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.variable(s, d.clone()).unwrap()).collect();
    let y = f(&mut tape, &vars).unwrap();
    let l = scalarize(&mut tape, y).unwrap();
    tape.value(l)[0]
}

/// Worst relative error over all inputs of `f`.
pub fn check<F>(inputs: &[Input], f: F) -> f64
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.variable(s, d.clone()).unwrap()).collect();
    let y = f(&mut tape, &vars).unwrap();
    let l = scalarize(&mut tape, y).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[k].1.len() {
            let mut plus = inputs.to_vec();
            plus[k].1[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].1[j] -= H;
            numeric.push((loss(&plus, &f) - loss(&minus, &f)) / (2.0 * H));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn random(shape: &[usize], seed: u64) -> Input {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    (shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random values with magnitude in `[0.1, 1)`, away from ReLU's kink.
pub fn away_from_zero(shape: &[usize], seed: u64) -> Input {
    let (s, d) = random(shape, seed);
    (s, d.into_iter().map(|v| v.signum() * (0.1 + 0.9 * v.abs())).collect())
}

pub fn positive(shape: &[usize], seed: u64) -> Input {
    let (s, d) = random(shape, seed);
    (s, d.into_iter().map(|v| 0.2 + 0.4 * (v + 1.0)).collect())
}

pub const OPS: [&str; 29] = [
    "matmul",
    "add",
    "add_bias",
    "mul",
    "scale",
    "relu",
    "reshape",
    "transpose",
    "sum",
    "mean",
    "softmax_rows",
    "softmax_cols",
    "softmax_masked",
    "layer_norm_injected",
    "cross_entropy",
    "cross_entropy_ignored_rows",
    "nll_from_probs",
    "conv2d_same_s1",
    "conv2d_same_s2",
    "conv2d_valid_s1",
    "conv2d_valid_s2",
    "depthwise_same_s1",
    "depthwise_same_s2",
    "depthwise_valid_s2",
    "global_avg_pool",
    "embedding",
    "concat_rows",
    "concat_cols",
    "slice_cols",
];

/// Relative error of one named op case.
pub fn op_case(name: &str) -> f64 {
    match name {
        "matmul" => check(&[random(&[3, 4], 1), random(&[4, 2], 2)], |t, v| t.matmul(v[0], v[1])),
        "add" => check(&[random(&[2, 3], 3), random(&[2, 3], 4)], |t, v| t.add(v[0], v[1])),
        "add_bias" => check(&[random(&[3, 4], 5), random(&[4], 6)], |t, v| t.add_bias(v[0], v[1])),
        "mul" => check(&[random(&[2, 3], 7), random(&[2, 3], 8)], |t, v| t.mul(v[0], v[1])),
        "scale" => check(&[random(&[2, 3], 9)], |t, v| Ok(t.scale(v[0], -1.7))),
        "relu" => check(&[away_from_zero(&[3, 4], 10)], |t, v| Ok(t.relu(v[0]))),
        "reshape" => check(&[random(&[2, 6], 11)], |t, v| {
            let r = t.reshape(v[0], &[3, 4])?;
            t.mul(r, r)
        }),
        "transpose" => check(&[random(&[2, 3], 12), random(&[2, 4], 13)], |t, v| {
            let a = t.transpose(v[0])?;
            t.matmul(a, v[1])
        }),
        "sum" => check(&[random(&[3, 3], 14)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        }),
        "mean" => check(&[random(&[3, 3], 15)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        }),
        "softmax_rows" => check(&[random(&[3, 4], 16)], |t, v| t.softmax(v[0], 1)),
        "softmax_cols" => check(&[random(&[3, 4], 17)], |t, v| t.softmax(v[0], 0)),
        "softmax_masked" => check(&[random(&[3, 3], 18)], |t, v| {
            let mask = t.constant(&[3, 3], vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0])?;
            let x = t.add(v[0], mask)?;
            t.softmax(x, 1)
        }),
        "layer_norm_injected" => check(
            &[random(&[3, 5], 19), random(&[3, 5], 20), random(&[5], 21), random(&[5], 22), random(&[5], 23)],
            |t, v| t.layer_norm_injected(v[0], v[1], v[2], v[3], v[4], 1e-5),
        ),
        "cross_entropy" => check(&[random(&[4, 5], 24)], |t, v| t.cross_entropy(v[0], &[1, 2, 3, 4], 0)),
        "cross_entropy_ignored_rows" => check(&[random(&[4, 5], 25)], |t, v| t.cross_entropy(v[0], &[1, 0, 3, 0], 0)),
        "nll_from_probs" => check(&[positive(&[3, 4], 26)], |t, v| t.nll_from_probs(v[0], &[0, 2, 3])),
        "conv2d_same_s1" => conv(1, Padding::Same, 27),
        "conv2d_same_s2" => conv(2, Padding::Same, 28),
        "conv2d_valid_s1" => conv(1, Padding::Valid, 29),
        "conv2d_valid_s2" => conv(2, Padding::Valid, 30),
        "depthwise_same_s1" => depthwise(1, Padding::Same, 31),
        "depthwise_same_s2" => depthwise(2, Padding::Same, 32),
        "depthwise_valid_s2" => depthwise(2, Padding::Valid, 33),
        "global_avg_pool" => check(&[random(&[3, 3, 4], 34)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.global_avg_pool(sq)
        }),
        "embedding" => check(&[random(&[5, 3], 35)], |t, v| t.embedding(v[0], &[1, 4, 1, 0])),
        "concat_rows" => check(&[random(&[2, 3], 36), random(&[1, 3], 37)], |t, v| {
            let c = t.concat_rows(&[v[0], v[1]])?;
            t.mul(c, c)
        }),
        "concat_cols" => check(&[random(&[2, 3], 38), random(&[2, 2], 39)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]])?;
            t.mul(c, c)
        }),
        "slice_cols" => check(&[random(&[3, 5], 40)], |t, v| {
            let s = t.slice_cols(v[0], 1, 3)?;
            t.mul(s, s)
        }),
        other => panic!("unknown op case {other}"),
    }
}

fn conv(stride: usize, padding: Padding, seed: u64) -> f64 {
    check(&[random(&[5, 5, 2], seed), random(&[3, 3, 2, 3], seed + 100)], move |t, v| {
        t.conv2d(v[0], v[1], stride, padding)
    })
}

fn depthwise(stride: usize, padding: Padding, seed: u64) -> f64 {
    check(&[random(&[5, 5, 3], seed), random(&[3, 3, 3], seed + 100)], move |t, v| {
        t.depthwise_conv2d(v[0], v[1], stride, padding)
    })
}

/// Compares batch gradients against central differences of the batch
/// objective on `samples` randomly chosen trainable entries.
pub fn model_check(model: &mut CaptionModel, batch: &[TrainExample], alpha: f64, lambda: f64, samples: usize, seed: u64) -> f64 {
    let refs: Vec<&TrainExample> = batch.iter().collect();
    let grads = model.batch_gradients(&refs, alpha, lambda, Execution::Sequential).unwrap().grads;
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (p, t) in model.params.tensors().iter().enumerate() {
        if t.requires_grad {
            entries.extend((0..t.numel()).map(|j| (p, j)));
        }
    }
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    entries.truncate(samples);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (p, j) in entries {
        analytic.push(grads[p].as_ref().map_or(0.0, |g| g[j]));
        let orig = model.params.tensors()[p].data()[j];
        model.params.tensors_mut()[p].data_mut()[j] = orig + H;
        let up = model.batch_objective(&refs, alpha, lambda).unwrap();
        model.params.tensors_mut()[p].data_mut()[j] = orig - H;
        let down = model.batch_objective(&refs, alpha, lambda).unwrap();
        model.params.tensors_mut()[p].data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * H));
    }
    relative_error(&analytic, &numeric)
}
