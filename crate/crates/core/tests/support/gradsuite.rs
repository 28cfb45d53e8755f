//! Central finite differences against the reverse pass, in f64.
//!
//! Shared by the core test suite and the acceptance runner.

#![allow(dead_code)]

use fedskel_core::autodiff::{Graph, Var};
use fedskel_core::mkd::{cross_entropy, kd_loss, TeacherStream};
use fedskel_core::model::{BnMode, ConvMode, ModelConfig, StGcn};
use fedskel_core::params::{Bound, ParamSet};
use fedskel_core::topology::{effective_adjacency, SkeletonGraph, TernaryVars};
use fedskel_core::{Result, Tensor64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const RTOL: f64 = 1e-3;
const ATOL: f64 = 1e-5;
const STEP: f64 = 1e-5;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    let n = shape.iter().product();
    Tensor64::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so a ReLU kink is never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    rand_tensor(rng, shape).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &Bound) -> Result<Var> + 'a;

/// Projects the output onto a fixed random direction so every element
/// contributes, then compares analytic and numeric gradients of every
/// trainable entry.
fn check(name: &str, seed: u64, params: &ParamSet<f64>, trainable: &dyn Fn(&str) -> bool, build: &Build) {
    let eval = |p: &ParamSet<f64>, proj: Option<&Tensor64>| -> (f64, Vec<usize>, Graph<f64>, Bound, Var) {
        let mut g = Graph::new();
        let b = p.bind(&mut g, trainable);
        let out = build(&mut g, &b).unwrap();
        let shape = g.shape(out).to_vec();
        let loss = match proj {
            Some(r) => {
                let r = g.constant(r.clone());
                let m = g.mul(out, r).unwrap();
                g.sum(m)
            }
            None => g.sum(out),
        };
        (g.value(loss).item(), shape, g, b, loss)
    };
    let (_, shape, _, _, _) = eval(params, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let proj = rand_tensor(&mut rng, &shape);
    let (_, _, mut g, b, loss) = eval(params, Some(&proj));
    g.backward(loss).unwrap();
    let grads = b.grads(&g);
    for (key, t) in params.iter() {
        if !trainable(key) {
            continue;
        }
        let analytic = grads.get(key).cloned().unwrap_or_else(|| Tensor64::zeros(t.shape()));
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(key).unwrap().data_mut()[i] += STEP;
            let mut minus = params.clone();
            minus.get_mut(key).unwrap().data_mut()[i] -= STEP;
            let numeric = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * STEP);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= ATOL + RTOL * numeric.abs(),
                "{name} seed {seed}: d/d{key}[{i}] analytic {a} numeric {numeric}"
            );
        }
    }
}

/// Inputs named `fixed.*` are fed as constants by the build closure.
fn all(k: &str) -> bool {
    !k.starts_with("fixed.")
}

fn op_suite(name: &str, make: impl Fn(&mut ChaCha8Rng) -> ParamSet<f64>, build: &Build) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = make(&mut rng);
        check(name, seed, &p, &all, build);
    }
}

fn set(entries: Vec<(&str, Tensor64)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (k, v) in entries {
        p.insert(k, v);
    }
    p
}

fn v(b: &Bound, k: &str) -> Var {
    b.var(k).unwrap()
}

pub fn elementwise_ops() {
    let two = |r: &mut ChaCha8Rng| set(vec![("a", rand_tensor(r, &[3, 4])), ("b", rand_tensor(r, &[3, 4]))]);
    op_suite("add", two, &|g, b| g.add(v(b, "a"), v(b, "b")));
    op_suite("sub", two, &|g, b| g.sub(v(b, "a"), v(b, "b")));
    op_suite("mul", two, &|g, b| g.mul(v(b, "a"), v(b, "b")));
    op_suite("hadamard", two, &|g, b| g.hadamard(v(b, "a"), v(b, "b")));
    op_suite("scale", two, &|g, b| Ok(g.scale(v(b, "a"), 1.7)));
    op_suite(
        "scale_by",
        |r| set(vec![("a", rand_tensor(r, &[3, 4])), ("s", rand_tensor(r, &[]))]),
        &|g, b| g.scale_by(v(b, "a"), v(b, "s")),
    );
    op_suite("relu", |r| set(vec![("a", away_from_zero(r, &[4, 5]))]), &|g, b| Ok(g.relu(v(b, "a"))));
}

pub fn reductions_and_reshape() {
    let one = |r: &mut ChaCha8Rng| set(vec![("a", rand_tensor(r, &[2, 3, 4, 5]))]);
    op_suite("sum", one, &|g, b| Ok(g.sum(v(b, "a"))));
    op_suite("mean", one, &|g, b| Ok(g.mean(v(b, "a"))));
    op_suite("mean_pool", one, &|g, b| g.mean_pool(v(b, "a")));
    op_suite("reshape", one, &|g, b| g.reshape(v(b, "a"), &[6, 20]));
}

pub fn linear_ops() {
    op_suite(
        "matmul",
        |r| set(vec![("a", rand_tensor(r, &[3, 4])), ("b", rand_tensor(r, &[4, 5]))]),
        &|g, b| g.matmul(v(b, "a"), v(b, "b")),
    );
    op_suite(
        "graph_mix",
        |r| set(vec![("x", rand_tensor(r, &[2, 3, 4, 5])), ("a", rand_tensor(r, &[5, 5]))]),
        &|g, b| g.graph_mix(v(b, "x"), v(b, "a")),
    );
    op_suite(
        "channel_mix",
        |r| set(vec![("w", rand_tensor(r, &[4, 3])), ("x", rand_tensor(r, &[2, 3, 4, 5]))]),
        &|g, b| g.channel_mix(v(b, "w"), v(b, "x")),
    );
    op_suite(
        "add_bias",
        |r| set(vec![("x", rand_tensor(r, &[3, 4])), ("b", rand_tensor(r, &[4]))]),
        &|g, b| g.add_bias(v(b, "x"), v(b, "b")),
    );
}

pub fn temporal_conv() {
    for (k, stride, t) in [(3, 1, 6), (3, 2, 7), (5, 2, 8), (1, 3, 7)] {
        op_suite(
            "temporal_conv",
            |r| set(vec![("x", rand_tensor(r, &[2, 3, t, 4])), ("k", rand_tensor(r, &[2, 3, k]))]),
            &|g, b| g.temporal_conv(v(b, "x"), v(b, "k"), stride),
        );
    }
    op_suite(
        "temporal_conv unbatched",
        |r| set(vec![("x", rand_tensor(r, &[3, 5, 2])), ("k", rand_tensor(r, &[4, 3, 3]))]),
        &|g, b| g.temporal_conv(v(b, "x"), v(b, "k"), 2),
    );
}

pub fn batchnorm() {
    let make = |r: &mut ChaCha8Rng| {
        set(vec![
            ("x", rand_tensor(r, &[3, 2, 4, 3])),
            ("gamma", rand_tensor(r, &[2])),
            ("beta", rand_tensor(r, &[2])),
        ])
    };
    op_suite("batchnorm_train", make, &|g, b| {
        Ok(g.batchnorm_train(v(b, "x"), v(b, "gamma"), v(b, "beta"))?.0)
    });
    op_suite("batchnorm_eval", make, &|g, b| {
        g.batchnorm_eval(v(b, "x"), v(b, "gamma"), v(b, "beta"), &[0.3, -0.2], &[1.5, 0.4])
    });
}

pub fn softmax_family() {
    let make = |r: &mut ChaCha8Rng| set(vec![("x", rand_tensor(r, &[3, 5]).map(|v| 3.0 * v))]);
    op_suite("softmax_rows", make, &|g, b| g.softmax_rows(v(b, "x")));
    op_suite("log_softmax_rows", make, &|g, b| g.log_softmax_rows(v(b, "x")));
    op_suite("cross_entropy", make, &|g, b| cross_entropy(g, v(b, "x"), &[0, 4, 2]));
}

pub fn kd_loss_student_gradient() {
    for temperature in [1.0, 2.5] {
        op_suite(
            "kd_loss",
            |r| {
                set(vec![
                    ("student", rand_tensor(r, &[3, 4]).map(|v| 2.0 * v)),
                    ("fixed.t1", rand_tensor(r, &[3, 4])),
                    ("fixed.t2", rand_tensor(r, &[3, 4])),
                ])
            },
            &|g, b| {
                let streams: Vec<TeacherStream> = ["fixed.t1", "fixed.t2"]
                    .iter()
                    .map(|k| {
                        let t = g.constant(g.value(v(b, k)).clone());
                        TeacherStream {
                            grain: 1,
                            mid: t,
                            logits: t,
                        }
                    })
                    .collect();
                kd_loss(g, &streams, v(b, "student"), temperature)
            },
        );
    }
}

pub fn effective_adjacency_terms() {
    op_suite(
        "effective_adjacency",
        |r| {
            let mut entries = vec![];
            for k in ["fixed.a", "i", "u"] {
                entries.push((k, rand_tensor(r, &[4, 4])));
            }
            for k in ["alpha", "beta", "gamma"] {
                entries.push((k, rand_tensor(r, &[])));
            }
            set(entries)
        },
        &|g, b| {
            let a = g.constant(g.value(v(b, "fixed.a")).clone());
            let t = TernaryVars {
                base: vec![a],
                inflected: vec![v(b, "i")],
                unique: Some(vec![v(b, "u")]),
                coefficients: [v(b, "alpha"), v(b, "beta"), v(b, "gamma")],
            };
            effective_adjacency(g, &t, 0)
        },
    );
}

fn tiny_model(mode: ConvMode) -> StGcn<f64> {
    let skel = SkeletonGraph::new(5, vec![(0, 1), (1, 2), (1, 3), (0, 4)], 0).unwrap();
    let cfg = ModelConfig {
        joints: 5,
        frames: 6,
        in_channels: 3,
        channels: vec![4, 6],
        temporal_kernel: 3,
        strides: vec![1, 2],
        feature_dim: 5,
        num_classes: 3,
        conv_mode: mode,
        ..ModelConfig::default()
    };
    StGcn::new(cfg, skel).unwrap()
}

/// Every op suite, by name.
pub const OPS: &[(&str, fn())] = &[
    ("elementwise_ops", elementwise_ops),
    ("reductions_and_reshape", reductions_and_reshape),
    ("linear_ops", linear_ops),
    ("temporal_conv", temporal_conv),
    ("batchnorm", batchnorm),
    ("softmax_family", softmax_family),
    ("kd_loss_student_gradient", kd_loss_student_gradient),
    ("effective_adjacency_terms", effective_adjacency_terms),
];

pub fn full_two_block_model() {
    for mode in [ConvMode::Ats, ConvMode::Vanilla] {
        let model = tiny_model(mode);
        for seed in 0..SEEDS {
            let mut params = model.init_params(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            // Perturb away from the symmetric init so every path is exercised.
            for (k, t) in params.iter_mut() {
                if !k.contains("running") {
                    for x in t.data_mut() {
                        *x += 0.1 * rng.random_range(-1.0..1.0);
                    }
                }
            }
            let x = rand_tensor(&mut rng, &[4, 3, 6, 5]);
            let labels = [0, 2, 1, 2];
            let trainable = |k: &str| model.is_trainable(k);
            check(&format!("model {mode:?}"), seed, &params, &trainable, &|g, b| {
                let input = g.constant(x.clone());
                let trace = model.forward(g, b, input, BnMode::Batch)?;
                cross_entropy(g, trace.logits.unwrap(), &labels)
            });
        }
    }
}
