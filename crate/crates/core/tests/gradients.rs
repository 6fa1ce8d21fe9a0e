//! Reverse-mode gradients against central finite differences.

mod support;

use std::cell::RefCell;

use ndarray::Array2;
use pdeflow::autodiff::Tape;
use pdeflow::flow::{SpaceTimeEncoder, TapeNeuralField, TimeEncoding};
use pdeflow::geometry::{Frame, Point3, PointCloud, PointCloudSequence, RigidPose, Vec3};
use pdeflow::losses::{eulerflow_loss_logged, LossConfig, MatchLog, SequenceTargets};
use pdeflow::nn::{backward, Activation, MlpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

#[test]
fn relu_network_gradients_match_finite_differences() {
    let check = check_network_gradients(Activation::Relu, 1e-8);
    assert!(check.worst_relative_error <= 1e-4, "{check:?}");
}

#[test]
fn sinc_network_gradients_match_finite_differences() {
    let check = check_network_gradients(Activation::Sinc, 1e-8);
    assert!(check.worst_relative_error <= 1e-4, "{check:?}");
}

#[test]
fn gaussian_network_gradients_match_finite_differences() {
    let check = check_network_gradients(Activation::gaussian(), 1e-8);
    assert!(check.worst_relative_error <= 1e-4, "{check:?}");
}

#[test]
fn double_double_oracle_is_precise() {
    let third = Dd::ONE.div(Dd::from(3.0));
    let back = third.mul(Dd::from(3.0)).sub(Dd::ONE);
    assert!(back.to_f64().abs() < 1e-30);
    let e = Dd::ONE.exp();
    assert_eq!(e.hi, std::f64::consts::E);
    // e = 2.718281828459045 + 1.4456468917292502e-16
    assert!((e.lo - 1.4456468917292502e-16).abs() < 1e-25, "{e:?}");
    let s = Dd::from(std::f64::consts::FRAC_PI_2).sinc();
    assert!((s.to_f64() - 2.0 / std::f64::consts::PI).abs() < 1e-16);
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = random_params(&small_config(Activation::Sinc, 1), &mut rng);
    let input = Array2::from_shape_simple_fn((6, 5), || rng.gen_range(-1.0..1.0));
    let a = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
    let b = Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0));
    let (ga, _) = tape_gradients(&params, &input, &a);
    let (gb, _) = tape_gradients(&params, &input, &b);
    let (gab, _) = tape_gradients(&params, &input, &(&a * 2.0 + &b));
    for ((x, y), z) in ga.tensors().zip(gb.tensors()).zip(gab.tensors()) {
        let expected = x * 2.0 + y;
        assert!((&expected - z).iter().all(|d| d.abs() <= 1e-10));
    }
}

fn tiny_scene() -> PointCloudSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base: Vec<Point3> = (0..8)
        .map(|_| Point3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(0.0..1.0)))
        .collect();
    let frames = (0..5)
        .map(|k| Frame {
            cloud: PointCloud::new(
                base.iter()
                    .map(|p| p + Vec3::new(0.15 * k as f64, rng.gen_range(-0.05..0.05), 0.0))
                    .collect(),
            ),
            timestamp: k as f64 * 0.1,
            ego_pose: RigidPose::identity(),
            gt: None,
        })
        .collect();
    PointCloudSequence::new("tiny", frames).unwrap()
}

struct Evaluation {
    loss: f64,
    grads: MlpParams,
    inputs: Vec<Array2<f64>>,
}

fn evaluate(params: &MlpParams, targets: &SequenceTargets, t: usize, log: &mut MatchLog) -> Evaluation {
    let encoder = SpaceTimeEncoder::new(&targets.timeline, TimeEncoding::Normalized).unwrap();
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let field = RecordingField {
        inner: TapeNeuralField { nodes, encoder },
        inputs: RefCell::new(Vec::new()),
    };
    let loss = eulerflow_loss_logged(&field, &mut tape, targets, t, &LossConfig::default(), Some(log)).unwrap();
    let grads = backward(&tape, &field.inner.nodes, loss.node).unwrap();
    Evaluation {
        loss: loss.breakdown.total,
        grads,
        inputs: field.inputs.into_inner(),
    }
}

#[test]
fn eulerflow_loss_gradient_matches_finite_differences() {
    let seq = tiny_scene();
    let targets = SequenceTargets::new(&seq).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = FD_STEP;
    for activation in [Activation::Relu, Activation::Sinc, Activation::gaussian()] {
        for t in [0, 2, 4] {
            // Draw priors until no ReLU unit sits on its kink along any rollout.
            let (params, recorded, base) = loop {
                let params = random_params(&small_config(activation, rng.gen()), &mut rng);
                let mut recorded = MatchLog::recording();
                let base = evaluate(&params, &targets, t, &mut recorded);
                if base.inputs.iter().all(|x| clear_of_kinks(&params, x, 1e-3)) {
                    break (params, recorded, base);
                }
            };
            assert!(!recorded.is_empty());
            // Rounding in `(up - down) / 2h` for a loss of this size.
            let noise = 64.0 * f64::EPSILON * base.loss.abs().max(1.0) / (2.0 * h);
            let mut probe = params.clone();
            for ti in 0..params.layers.len() * 2 {
                let shape = params.tensors().nth(ti).unwrap().dim();
                for idx in ndarray::indices(shape) {
                    let original = probe.tensors().nth(ti).unwrap()[idx];
                    probe.tensors_mut().nth(ti).unwrap()[idx] = original + h;
                    let up = evaluate(&probe, &targets, t, &mut recorded.clone().into_replay()).loss;
                    probe.tensors_mut().nth(ti).unwrap()[idx] = original - h;
                    let down = evaluate(&probe, &targets, t, &mut recorded.clone().into_replay()).loss;
                    probe.tensors_mut().nth(ti).unwrap()[idx] = original;
                    let fd = (up - down) / (2.0 * h);
                    let analytic = base.grads.tensors().nth(ti).unwrap()[idx];
                    let tolerance = 1e-3 * analytic.abs().max(fd.abs()) + noise;
                    assert!(
                        (analytic - fd).abs() <= tolerance,
                        "{activation:?} t={t} tensor {ti} {idx:?}: {analytic} vs {fd}"
                    );
                }
            }
        }
    }
}
