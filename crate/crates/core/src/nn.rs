//! The coordinate MLP used as the motion-field prior.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Matrix, NodeId, Tape};
use crate::error::{Error, Result};

pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Activation {
    #[default]
    Relu,
    /// `sin(x) / x`, with value 1 at the origin.
    Sinc,
    /// `exp(-x² / (2σ²))`.
    Gaussian { sigma: f64 },
}

// Below this magnitude sinc and its derivative use their Taylor expansions.
const SINC_SERIES: f64 = 1e-4;

impl Activation {
    pub fn gaussian() -> Self {
        Activation::Gaussian {
            sigma: DEFAULT_GAUSSIAN_SIGMA,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sinc => {
                if x == 0.0 {
                    1.0
                } else if x.abs() < SINC_SERIES {
                    1.0 - x * x / 6.0
                } else {
                    x.sin() / x
                }
            }
            Activation::Gaussian { sigma } => (-x * x / (2.0 * sigma * sigma)).exp(),
        }
    }

    /// Derivative at pre-activation `x`, given `y = apply(x)`. ReLU's
    /// subgradient at 0 is 0.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sinc => {
                if x.abs() < SINC_SERIES {
                    -x / 3.0 + x * x * x / 30.0
                } else {
                    (x.cos() - y) / x
                }
            }
            Activation::Gaussian { sigma } => -x / (sigma * sigma) * y,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sinc => 1,
            Activation::Gaussian { .. } => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sinc => "sinc",
            Activation::Gaussian { .. } => "gaussian",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "sinc" => Ok(Activation::Sinc),
            "gaussian" => Ok(Activation::gaussian()),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }

    pub fn sigma(self) -> f64 {
        match self {
            Activation::Gaussian { sigma } => sigma,
            _ => DEFAULT_GAUSSIAN_SIGMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: 5,
            hidden_width: 128,
            depth: 8,
            output_dim: 3,
            activation: Activation::Relu,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.hidden_width < 1 || self.input_dim < 1 || self.output_dim < 1 {
            return Err(Error::InvalidArgument(format!(
                "network dimensions must be positive: {self:?}"
            )));
        }
        if let Activation::Gaussian { sigma } = self.activation {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::InvalidArgument("gaussian sigma must be positive".into()));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        shapes.push((self.input_dim, self.hidden_width));
        for _ in 1..self.depth {
            shapes.push((self.hidden_width, self.hidden_width));
        }
        shapes.push((self.hidden_width, self.output_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// One affine layer: `y = x · weight + bias`, `weight` is `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub layers: Vec<Layer>,
}

/// Uniform fan-in initialization from a seeded ChaCha8 stream; weights are
/// drawn layer by layer in row-major order, biases start at zero.
pub fn init_params(config: &MlpConfig) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let bound = (1.0 / fan_in as f64).sqrt();
            Layer {
                weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.gen_range(-bound..bound)
                }),
                bias: Array2::zeros((1, fan_out)),
            }
        })
        .collect();
    Ok(MlpParams {
        config: *config,
        layers,
    })
}

impl MlpParams {
    /// Same shapes, all entries zero.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: *config,
            layers: config
                .layer_shapes()
                .into_iter()
                .map(|(i, o)| Layer {
                    weight: Array2::zeros((i, o)),
                    bias: Array2::zeros((1, o)),
                })
                .collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.dim()),
                    bias: Array2::zeros(l.bias.dim()),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    /// Weight then bias, layer by layer.
    pub fn tensors(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.tensors().zip(other.tensors()).all(|(a, b)| a.dim() == b.dim())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch("parameter sets differ in shape".into()));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.scaled_add(scale, b);
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Tape-free batched evaluation, `n × input_dim → n × output_dim`.
    pub fn evaluate(&self, input: &Matrix) -> Result<Matrix> {
        check_input(&self.config, input)?;
        let act = self.config.activation;
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer
                .bias
                .broadcast((x.nrows(), layer.weight.ncols()))
                .expect("bias broadcast")
                .to_owned();
            general_mat_mul(1.0, &x, &layer.weight, 1.0, &mut out);
            if i < last {
                out.mapv_inplace(|v| act.apply(v));
            }
            x = out;
        }
        Ok(x)
    }
}

fn check_input(config: &MlpConfig, input: &Matrix) -> Result<()> {
    if input.ncols() != config.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} inputs, got {}",
            config.input_dim,
            input.ncols()
        )));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("network input"));
    }
    Ok(())
}

/// Parameter leaves of an [`MlpParams`] on a particular tape.
#[derive(Debug, Clone)]
pub struct MlpNodes {
    config: MlpConfig,
    layers: Vec<(NodeId, NodeId)>,
}

impl MlpNodes {
    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Records a dense layer per hidden layer, then the output affine.
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<NodeId> {
        check_input(&self.config, tape.value(input))?;
        let last = self.layers.len() - 1;
        let mut x = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            x = if i < last {
                tape.dense(x, w, b, self.config.activation)
            } else {
                tape.affine(x, w, b)
            };
        }
        Ok(x)
    }

    /// Gradients arranged like the parameters; untouched parameters get zeros.
    pub fn gradients(&self, grads: &Gradients, tape: &Tape) -> MlpParams {
        let pick = |id: NodeId| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(tape.value(id).dim()))
        };
        MlpParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| Layer {
                    weight: pick(w),
                    bias: pick(b),
                })
                .collect(),
        }
    }
}

/// Reverse pass from `loss`, returning gradients shaped like the parameters.
pub fn backward(tape: &Tape, nodes: &MlpNodes, loss: NodeId) -> Result<MlpParams> {
    let grads = tape.backward(loss)?;
    Ok(nodes.gradients(&grads, tape))
}
