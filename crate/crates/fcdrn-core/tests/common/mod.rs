#![allow(dead_code)]

//! Shared test harness: central-difference gradient verification for
//! every differentiable operator, plus small helpers reused by the
//! acceptance suite.

use fcdrn_core::blocks::{Fwd, MultigridBlock, ResidualBasicBlock};
use fcdrn_core::tensor::ops::{self, DropoutKind, Target};
use fcdrn_core::tensor::{Shape, Tape, Tensor, Tp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const GRAD_TOL: f64 = 1e-4;
const FD_H: f64 = 1e-5;

/// Max relative error between tape gradients and central differences,
/// over every element of every parameter. The forward closure must be
/// deterministic (rebuild any RNG inside).
pub fn gradient_check(params: &[&Tensor<f64>], f: &dyn Fn(Tp<'_, f64>) -> Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let loss = f(Some(&tape));
    for p in params {
        p.zero_grad();
    }
    tape.backward(&loss).expect("backward");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + FD_H;
            let lp = f(None).item();
            p.data_mut()[i] = orig - FD_H;
            let lm = f(None).item();
            p.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_H);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Random elementwise weighting by a seeded dropout mask before the
/// final sum, so misplaced backward contributions cannot cancel.
fn weighted_sum(tape: Tp<'_, f64>, y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = ops::dropout(tape, y, 0.5, true, DropoutKind::Element, &mut rng).unwrap();
    ops::sum_all(tape, &d)
}

fn rand_tensor(rng: &mut ChaCha20Rng, shape: Shape, away_from_zero: bool) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.numel())
        .map(|_| {
            let mut v: f64 = rng.gen_range(-1.0..1.0);
            if away_from_zero && v.abs() < 0.08 {
                v += 0.16_f64.copysign(v + 1e-9);
            }
            v
        })
        .collect();
    Tensor::param(shape, data).unwrap()
}

pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel: f64,
}

fn record(results: &mut Vec<OpCheck>, name: &'static str, cases: usize, max_rel: f64) {
    results.push(OpCheck { name, cases, max_rel });
}

pub fn check_conv2d(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let ci = rng.gen_range(1..4);
        let co = rng.gen_range(1..4);
        let k = [1, 3, 3, 5][rng.gen_range(0..4)];
        let stride = if case % 3 == 0 { 2 } else { 1 };
        let dilation = if stride == 1 && case % 4 == 0 { 2 } else { 1 };
        let extent = k * dilation + 2;
        let h = rng.gen_range(extent..extent + 4);
        let w = rng.gen_range(extent..extent + 4);
        let pad = ops::same_padding(k, dilation);
        let x = rand_tensor(&mut rng, Shape::new(n, ci, h, w), false);
        let wt = rand_tensor(&mut rng, Shape::new(co, ci, k, k), false);
        let b = rand_tensor(&mut rng, Shape::new(1, co, 1, 1), false);
        let seed = 9000 + case as u64;
        let err = gradient_check(&[&x, &wt, &b], &|tape| {
            let y = ops::conv2d(tape, &x, &wt, &b, stride, dilation, pad).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_maxpool(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(2..8);
        let w = rng.gen_range(2..8);
        // distinct values keep the argmax stable under perturbation
        let numel = n * c * h * w;
        let mut vals: Vec<f64> = (0..numel).map(|i| i as f64 * 0.37).collect();
        for i in (1..numel).rev() {
            let j = rng.gen_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::param(Shape::new(n, c, h, w), vals).unwrap();
        let seed = 9100 + case as u64;
        let err = gradient_check(&[&x], &|tape| {
            let (y, _) = ops::maxpool2d(tape, &x).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_upsample(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let c = rng.gen_range(1..3);
        let h = rng.gen_range(2..5);
        let w = rng.gen_range(2..5);
        let th = h + rng.gen_range(0..4);
        let tw = w + rng.gen_range(0..4);
        let x = rand_tensor(&mut rng, Shape::new(n, c, h, w), false);
        let seed = 9200 + case as u64;
        let err = gradient_check(&[&x], &|tape| {
            let y = ops::upsample_nearest(tape, &x, th, tw).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_batchnorm(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(2..4);
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(2..4);
        let w = rng.gen_range(2..4);
        let train = case % 3 != 2;
        let x = rand_tensor(&mut rng, Shape::new(n, c, h, w), false);
        let gamma = rand_tensor(&mut rng, Shape::new(1, c, 1, 1), true);
        let beta = rand_tensor(&mut rng, Shape::new(1, c, 1, 1), false);
        let rm = Tensor::from_vec(Shape::new(1, c, 1, 1), (0..c).map(|i| 0.1 * i as f64).collect()).unwrap();
        let rv = Tensor::from_vec(Shape::new(1, c, 1, 1), (0..c).map(|i| 0.8 + 0.1 * i as f64).collect()).unwrap();
        let seed = 9300 + case as u64;
        let err = gradient_check(&[&x, &gamma, &beta], &|tape| {
            let y = ops::batchnorm(tape, &x, &gamma, &beta, &rm, &rv, 0.1, 1e-5, train).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_relu(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let shape = Shape::new(rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..5));
        let x = rand_tensor(&mut rng, shape, true);
        let seed = 9400 + case as u64;
        let err = gradient_check(&[&x], &|tape| {
            let y = ops::relu(tape, &x);
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_dropout(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let shape = Shape::new(rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..5), rng.gen_range(2..5));
        let x = rand_tensor(&mut rng, shape, false);
        let kind = if case % 2 == 0 { DropoutKind::Element } else { DropoutKind::Channel };
        let seed = 9500 + case as u64;
        let err = gradient_check(&[&x], &|tape| {
            let mut drng = ChaCha20Rng::seed_from_u64(seed);
            let y = ops::dropout(tape, &x, 0.3, true, kind, &mut drng).unwrap();
            ops::sum_all(tape, &y)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_add_concat(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let h = rng.gen_range(2..5);
        let w = rng.gen_range(2..5);
        let c = rng.gen_range(1..4);
        let a = rand_tensor(&mut rng, Shape::new(n, c, h, w), false);
        let b = rand_tensor(&mut rng, Shape::new(n, c, h, w), false);
        let c2 = rng.gen_range(1..4);
        let d = rand_tensor(&mut rng, Shape::new(n, c2, h, w), false);
        let seed = 9600 + case as u64;
        let err = gradient_check(&[&a, &b, &d], &|tape| {
            let s = ops::add(tape, &a, &b).unwrap();
            let y = ops::concat_channels(tape, &[s, d.clone()]).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_loss(cases: usize) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = rng.gen_range(1..3);
        let k = rng.gen_range(2..5);
        let h = rng.gen_range(1..4);
        let w = rng.gen_range(1..4);
        let logits = rand_tensor(&mut rng, Shape::new(n, k, h, w), false);
        if case % 2 == 0 {
            let labels: Vec<u32> =
                (0..n * h * w).map(|_| rng.gen_range(0..k as u32 + 1)).collect(); // k = void
            let err = gradient_check(&[&logits], &|tape| {
                ops::softmax_cross_entropy(
                    tape,
                    &logits,
                    Target::Hard { labels: &labels, void: Some(k as u32) },
                )
                .unwrap()
            });
            worst = worst.max(err);
        } else {
            let labels: Vec<u32> = (0..n * h * w).map(|_| rng.gen_range(0..k as u32)).collect();
            let (probs, valid) =
                fcdrn_core::train::soften::<f64>(&labels, logits.shape(), 0.9, 0.01, None).unwrap();
            let err = gradient_check(&[&logits], &|tape| {
                ops::softmax_cross_entropy(tape, &logits, Target::Soft { probs: &probs, valid: Some(&valid) })
                    .unwrap()
            });
            worst = worst.max(err);
        }
    }
    worst
}

pub fn check_residual_block(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha20Rng::seed_from_u64(900 + case as u64);
        let in_c = rng.gen_range(1..4);
        let out_c = if case % 2 == 0 { in_c } else { rng.gen_range(1..4) };
        let block =
            ResidualBasicBlock::<f64>::new(in_c, out_c, 0.2, DropoutKind::Element, 0.1, 1e-5, &mut rng)
                .unwrap();
        let h = rng.gen_range(3..6);
        let w = rng.gen_range(3..6);
        let x = rand_tensor(&mut rng, Shape::new(2, in_c, h, w), false);
        let mut params: Vec<&Tensor<f64>> = vec![&x, &block.conv1.weight, &block.conv1.bias, &block.bn1.gamma];
        if let Some(p) = &block.proj {
            params.push(&p.weight);
        }
        let seed = 9700 + case as u64;
        let err = gradient_check(&params, &|tape| {
            let mut drng = ChaCha20Rng::seed_from_u64(seed);
            let mut cx = Fwd::new(tape, true, &mut drng);
            let y = block.forward(&mut cx, &x).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

pub fn check_multigrid(cases: usize) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..cases {
        let mut rng = ChaCha20Rng::seed_from_u64(1000 + case as u64);
        let c = rng.gen_range(1..3);
        let rates = if case % 2 == 0 { vec![2, 2, 2] } else { vec![2, 4, 8] };
        let block = MultigridBlock::<f64>::new(c, c, rates, &mut rng).unwrap();
        let size = 2 * 8 + 3; // covers the widest dilation
        let x = rand_tensor(&mut rng, Shape::new(1, c, size, size), false);
        let seed = 9800 + case as u64;
        let err = gradient_check(&[&x, &block.convs[0].weight, &block.convs[2].weight], &|tape| {
            let y = block.forward(tape, &x).unwrap();
            weighted_sum(tape, &y, seed)
        });
        worst = worst.max(err);
    }
    worst
}

/// The full per-operator sweep used by the acceptance suite.
pub fn run_gradient_suite(cases: usize) -> Vec<OpCheck> {
    let mut results = Vec::new();
    record(&mut results, "conv2d", cases, check_conv2d(cases));
    record(&mut results, "maxpool2d", cases, check_maxpool(cases));
    record(&mut results, "upsample_nearest", cases, check_upsample(cases));
    record(&mut results, "batchnorm", cases, check_batchnorm(cases));
    record(&mut results, "relu", cases, check_relu(cases));
    record(&mut results, "dropout", cases, check_dropout(cases));
    record(&mut results, "add+concat", cases, check_add_concat(cases));
    record(&mut results, "softmax_cross_entropy", cases, check_loss(cases));
    record(&mut results, "residual_block", cases, check_residual_block(cases));
    record(&mut results, "multigrid_block", cases, check_multigrid(cases));
    results
}
