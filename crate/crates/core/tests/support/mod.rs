//! Shared oracles for integration tests.
#![allow(dead_code)]

use std::cell::RefCell;

use ndarray::Array2;
use pdeflow::autodiff::{Matrix, NodeId, Tape};
use pdeflow::flow::{Direction, TapeMotionField, TapeNeuralField};
use pdeflow::nn::{init_params, Activation, MlpConfig, MlpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Double-double number `hi + lo` with about 106 significant bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    Dd { hi: s, lo: err }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    /// `a + b` held exactly.
    pub fn sum_exact(a: f64, b: f64) -> Self {
        two_sum(a, b)
    }

    pub fn add(self, o: Dd) -> Dd {
        let s = two_sum(self.hi, o.hi);
        let t = two_sum(self.lo, o.lo);
        let v = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(v.hi, v.lo + t.lo)
    }

    pub fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        quick_two_sum(p, e)
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        quick_two_sum(q1, q2).add(Dd::from(q3))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Taylor series with argument halving; accurate to well below 1e-28
    /// relative for the magnitudes used in tests.
    pub fn exp(self) -> Dd {
        assert!(self.hi.abs() < 700.0, "exp argument out of test range");
        let halvings = 12;
        let r = self.mul(Dd::from(1.0 / (1u64 << halvings) as f64));
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..30 {
            term = term.mul(r).div(Dd::from(n as f64));
            sum = sum.add(term);
        }
        for _ in 0..halvings {
            sum = sum.mul(sum);
        }
        sum
    }

    /// `sin(x)/x` by its Taylor series; fine for `|x| < 20`.
    pub fn sinc(self) -> Dd {
        assert!(self.hi.abs() < 20.0, "sinc argument out of test range");
        let x2 = self.mul(self);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..80 {
            let k = (2 * n) as f64;
            term = term.mul(x2).div(Dd::from(k * (k + 1.0))).neg();
            sum = sum.add(term);
            if term.hi.abs() < 1e-40 {
                break;
            }
        }
        sum
    }
}

pub fn activate_dd(a: Activation, x: Dd) -> Dd {
    match a {
        Activation::Relu => {
            if x.hi > 0.0 {
                x
            } else {
                Dd::ZERO
            }
        }
        Activation::Sinc => x.sinc(),
        Activation::Gaussian { sigma } => {
            let s2 = Dd::from(sigma).mul(Dd::from(sigma)).mul(Dd::from(2.0));
            x.mul(x).div(s2).neg().exp()
        }
    }
}

/// Network parameters as double-doubles, so single entries can be nudged exactly.
#[derive(Debug, Clone)]
pub struct DdNet {
    pub activation: Activation,
    /// Per layer: weight (row-major) and bias, with shapes.
    pub layers: Vec<(Vec<Dd>, Vec<Dd>, usize, usize)>,
}

impl DdNet {
    pub fn from_params(p: &MlpParams) -> Self {
        DdNet {
            activation: p.config.activation,
            layers: p
                .layers
                .iter()
                .map(|l| {
                    let (fi, fo) = l.weight.dim();
                    (
                        l.weight.iter().map(|&v| Dd::from(v)).collect(),
                        l.bias.iter().map(|&v| Dd::from(v)).collect(),
                        fi,
                        fo,
                    )
                })
                .collect(),
        }
    }

    /// Adds `h` exactly to entry `idx` of tensor `t` (weight then bias per layer).
    pub fn nudge(&mut self, t: usize, idx: usize, h: f64) {
        let layer = &mut self.layers[t / 2];
        let slot = if t % 2 == 0 { &mut layer.0[idx] } else { &mut layer.1[idx] };
        assert_eq!(slot.lo, 0.0);
        *slot = Dd::sum_exact(slot.hi, h);
    }

    pub fn forward_row(&self, input: &[Dd]) -> Vec<Dd> {
        let mut x = input.to_vec();
        let last = self.layers.len() - 1;
        for (i, (w, b, fi, fo)) in self.layers.iter().enumerate() {
            assert_eq!(x.len(), *fi);
            let mut z = b.clone();
            for (r, xr) in x.iter().enumerate() {
                for c in 0..*fo {
                    z[c] = z[c].add(xr.mul(w[r * fo + c]));
                }
            }
            x = if i < last { z.into_iter().map(|v| activate_dd(self.activation, v)).collect() } else { z };
        }
        x
    }

    /// `Σ c_ij · y_ij` over the rows of `input`.
    pub fn probe_loss(&self, input: &[Vec<Dd>], coeffs: &Matrix) -> Dd {
        let mut total = Dd::ZERO;
        for (i, row) in input.iter().enumerate() {
            for (j, y) in self.forward_row(row).into_iter().enumerate() {
                total = total.add(y.mul(Dd::from(coeffs[(i, j)])));
            }
        }
        total
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a denominator floor.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn small_config(activation: Activation, seed: u64) -> MlpConfig {
    MlpConfig {
        input_dim: 5,
        hidden_width: 8,
        depth: 2,
        output_dim: 3,
        activation,
        seed,
    }
}

/// Fan-in initialization plus random biases, so every parameter matters.
pub fn random_params(config: &MlpConfig, rng: &mut ChaCha8Rng) -> MlpParams {
    let mut p = init_params(config).unwrap();
    for layer in &mut p.layers {
        layer.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }
    p
}

pub fn pre_activations(params: &MlpParams, input: &Matrix) -> Vec<Matrix> {
    let mut out = Vec::new();
    let mut x = input.clone();
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        let z = x.dot(&l.weight) + &l.bias;
        if i < last {
            x = z.mapv(|v| params.config.activation.apply(v));
            out.push(z);
        }
    }
    out
}

/// True when no ReLU pre-activation lies within `margin` of the kink.
pub fn clear_of_kinks(params: &MlpParams, input: &Matrix, margin: f64) -> bool {
    params.config.activation != Activation::Relu
        || pre_activations(params, input).iter().all(|z| z.iter().all(|v| v.abs() > margin))
}

/// Reverse-mode gradients of `Σ c_ij · y_ij` w.r.t. parameters and inputs.
pub fn tape_gradients(params: &MlpParams, input: &Matrix, coeffs: &Matrix) -> (MlpParams, Matrix) {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let x = tape.param(input.clone());
    let y = nodes.forward(&mut tape, x).unwrap();
    // Select each output column, then weight its rows.
    let n = coeffs.nrows();
    let zero = tape.constant(Array2::zeros((1, 1)));
    let mut terms = Vec::new();
    for j in 0..3 {
        let mut sel = Array2::zeros((3, 1));
        sel[(j, 0)] = 1.0;
        let sel = tape.constant(sel);
        let yj = tape.affine(y, sel, zero);
        terms.push(tape.weighted_sum(yj, (0..n).map(|i| coeffs[(i, j)]).collect()));
    }
    let loss = tape.add_all(&terms);
    let grads = tape.backward(loss).unwrap();
    let input_grad = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(input.dim()));
    (nodes.gradients(&grads, &tape), input_grad)
}

/// Outcome of [`check_network_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub worst_relative_error: f64,
    pub entries: usize,
}

/// Central differences (step [`FD_STEP`]) of 20 random depth-2 width-8
/// priors, evaluated in double-double precision, against the tape's
/// gradients for every parameter and input entry.
pub fn check_network_gradients(activation: Activation, floor: f64) -> GradientCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfd);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let h = FD_STEP;
    for trial in 0..20 {
        let params = random_params(&small_config(activation, trial), &mut rng);
        let input = loop {
            let x = Array2::from_shape_simple_fn((4, 5), || rng.gen_range(-1.0..1.0));
            if clear_of_kinks(&params, &x, 1e-3) {
                break x;
            }
        };
        let coeffs = Array2::from_shape_simple_fn((4, 3), || rng.gen_range(-1.0..1.0));
        let (grads, input_grad) = tape_gradients(&params, &input, &coeffs);
        let rows: Vec<Vec<Dd>> = input.rows().into_iter().map(|r| r.iter().map(|&v| Dd::from(v)).collect()).collect();
        let net = DdNet::from_params(&params);
        let two_h = Dd::from(2.0 * h);

        for (t, g) in grads.tensors().enumerate() {
            for (idx, analytic) in g.iter().enumerate() {
                let mut up = net.clone();
                up.nudge(t, idx, h);
                let mut down = net.clone();
                down.nudge(t, idx, -h);
                let fd = up.probe_loss(&rows, &coeffs).sub(down.probe_loss(&rows, &coeffs)).div(two_h).to_f64();
                let e = rel_err(*analytic, fd, floor);
                assert!(e.is_finite());
                worst = worst.max(e);
                entries += 1;
            }
        }
        for ((i, j), analytic) in input_grad.indexed_iter() {
            let mut up = rows.clone();
            up[i][j] = Dd::sum_exact(input[(i, j)], h);
            let mut down = rows.clone();
            down[i][j] = Dd::sum_exact(input[(i, j)], -h);
            let fd = net.probe_loss(&up, &coeffs).sub(net.probe_loss(&down, &coeffs)).div(two_h).to_f64();
            worst = worst.max(rel_err(*analytic, fd, floor));
            entries += 1;
        }
    }
    GradientCheck {
        worst_relative_error: worst,
        entries,
    }
}

/// Wraps a tape field and keeps every network input it is asked to evaluate.
pub struct RecordingField {
    pub inner: TapeNeuralField,
    pub inputs: RefCell<Vec<Matrix>>,
}

impl TapeMotionField for RecordingField {
    fn record(&self, tape: &mut Tape, positions: NodeId, t: f64, d: Direction) -> pdeflow::Result<NodeId> {
        let features = self.inner.encoder.features(t, d)?;
        let pos = tape.value(positions);
        let input = Array2::from_shape_fn((pos.nrows(), 3 + features.len()), |(i, j)| {
            if j < 3 {
                pos[(i, j)]
            } else {
                features[j - 3]
            }
        });
        self.inputs.borrow_mut().push(input);
        self.inner.record(tape, positions, t, d)
    }
}
