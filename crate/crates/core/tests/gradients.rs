mod common;

use common::*;
use fedharmony_core::alignment::{local_alignment_loss_and_grad, AlignmentLossSpec, WeightMask};
use fedharmony_core::corrstats::{correlation, correlation_gradient, PredictionMatrix};
use fedharmony_core::datagen::ClientData;
use fedharmony_core::federation::{
    alignment_loss_and_param_grad, bce_loss_and_grad, local_objective, AlignmentTarget,
};
use ndarray::Array2;
use rand::Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

#[test]
fn correlation_jacobian_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let f = uniform(&mut r, 5, 3, 0.05, 0.95);
        let jac = correlation_gradient(&PredictionMatrix::new(f.clone()).unwrap(), 1e-8).unwrap();
        for c in 0..3 {
            for c2 in 0..3 {
                let numeric = numeric_grad(&f, H, |x| {
                    correlation(&PredictionMatrix::new(x.clone()).unwrap(), 1e-8).unwrap().values()[[c, c2]]
                });
                let err = max_rel_err(&jac.slice(c, c2), &numeric);
                assert!(err < TOL, "seed {seed} pair ({c},{c2}): {err}");
            }
        }
    }
}

fn check_alignment(spec: &AlignmentLossSpec, n: usize, c: usize, seed: u64) {
    let mut r = rng(seed);
    let f = uniform(&mut r, n, c, 0.05, 0.95);
    let target = random_consensus(&mut r, c);
    let (_, grad) = local_alignment_loss_and_grad(&PredictionMatrix::new(f.clone()).unwrap(), &target, spec, 1e-8).unwrap();
    let numeric = numeric_grad(&f, H, |x| {
        local_alignment_loss_and_grad(&PredictionMatrix::new(x.clone()).unwrap(), &target, spec, 1e-8)
            .unwrap()
            .0
    });
    let err = max_rel_err(&grad, &numeric);
    assert!(err < TOL, "seed {seed}: {err}");
}

#[test]
fn full_alignment_gradient_matches_finite_differences() {
    for seed in 0..20 {
        check_alignment(&AlignmentLossSpec::full(0.7), 6, 4, seed);
    }
}

#[test]
fn block_alignment_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let part = random_partition(&mut r, 6, 2 + (seed as usize % 2));
        let mask = WeightMask::block(part.clone(), 1.5, 0.25).unwrap();
        let plain = AlignmentLossSpec::blocks(1.3, part);
        let weighted = AlignmentLossSpec {
            weights: Some(mask.values().clone()),
            ..plain.clone()
        };
        check_alignment(&plain, 7, 6, seed);
        check_alignment(&weighted, 7, 6, seed);
    }
}

fn toy_client(seed: u64, n: usize, d: usize, c: usize) -> ClientData {
    let mut r = rng(seed);
    let x = uniform(&mut r, n, d, -1.0, 1.0);
    let mut y = Array2::from_shape_simple_fn((n, c), || if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 });
    // keep every label column non-constant so marginals stay interior
    for j in 0..c {
        y[[0, j]] = 1.0;
        y[[1, j]] = 0.0;
    }
    ClientData::new(x, y).unwrap()
}

#[test]
fn bce_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let data = toy_client(seed, 6, 3, 4);
        let theta = uniform(&mut rng(seed + 50), 4, 4, -1.0, 1.0);
        let (_, grad) = bce_loss_and_grad(&theta, &data.features, &data.labels).unwrap();
        let numeric = numeric_grad(&theta, H, |t| bce_loss_and_grad(t, &data.features, &data.labels).unwrap().0);
        let err = max_rel_err(&grad, &numeric);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn alignment_parameter_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let data = toy_client(seed, 8, 3, 4);
        let mut r = rng(seed + 70);
        let theta = uniform(&mut r, 4, 4, -0.8, 0.8);
        let target = random_consensus(&mut r, 4);
        let spec = AlignmentLossSpec::blocks(2.0, random_partition(&mut r, 4, 2));
        let (_, grad) = alignment_loss_and_param_grad(&theta, &data.features, &target, &spec, 1e-8).unwrap();
        let numeric = numeric_grad(&theta, H, |t| {
            alignment_loss_and_param_grad(t, &data.features, &target, &spec, 1e-8).unwrap().0
        });
        let err = max_rel_err(&grad, &numeric);
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn total_local_loss_gradient_on_three_samples() {
    // 3 samples, C = 3, d = 2
    let x = ndarray::array![[0.3, -1.2], [1.1, 0.4], [-0.7, 0.9]];
    let y = ndarray::array![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]];
    let data = ClientData::new(x, y).unwrap();
    for seed in 0..20 {
        let mut r = rng(seed + 200);
        let theta = uniform(&mut r, 3, 3, -1.0, 1.0);
        for spec in [AlignmentLossSpec::full(0.5), AlignmentLossSpec::blocks(0.5, random_partition(&mut r, 3, 2))] {
            let target = AlignmentTarget {
                consensus: random_consensus(&mut r, 3),
                spec,
            };
            let (_, grad) = local_objective(&theta, &data, Some(&target), 1e-8).unwrap();
            let numeric = numeric_grad(&theta, H, |t| local_objective(t, &data, Some(&target), 1e-8).unwrap().0);
            let err = max_rel_err(&grad, &numeric);
            assert!(err < TOL, "seed {seed}: {err}");
        }
    }
}
