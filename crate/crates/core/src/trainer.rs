//! Whole-sequence optimization: window scheduling, Adam, early stopping,
//! the two-frame baseline and the ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
use crate::autodiff::{MatmulPrecision, Tape};
use crate::error::{Error, Result};
use crate::flow::{extract_flow_field, rows_to_vecs, NeuralField, SpaceTimeEncoder, TapeNeuralField, TimeEncoding, Timeline};
use crate::geometry::{PointCloud, PointCloudSequence, Vec3};
use crate::losses::{eulerflow_loss, nsfp_loss, LossConfig, LossTerm, SequenceTargets, Target};
use crate::metrics::{collect_samples, evaluate, BucketSpec, MetricReport};
use crate::nn::{backward, init_params, Activation, MlpConfig, MlpParams};

/// Stream offset separating the window shuffle from parameter initialization.
const SHUFFLE_STREAM: u64 = 0x5eed_0f_5ca1e;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Frames per window; one gradient step per window.
    pub minibatch_frames: usize,
    /// Offset between consecutive window starts.
    pub window_stride: usize,
    pub early_stop_patience: usize,
    /// Relative improvement over the best loss that resets patience.
    pub early_stop_min_delta: f64,
    /// Seeds both parameter initialization and the window shuffle.
    pub seed: u64,
    pub subsequence_length: Option<usize>,
    pub loss: LossConfig,
    /// `input_dim` is overwritten from `time_encoding` and `seed` from the
    /// field above when fitting.
    pub mlp: MlpConfig,
    pub time_encoding: TimeEncoding,
    pub matmul_precision: MatmulPrecision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: DEFAULT_LEARNING_RATE,
            minibatch_frames: 5,
            window_stride: 5,
            early_stop_patience: 100,
            early_stop_min_delta: 1e-4,
            seed: 0,
            subsequence_length: None,
            loss: LossConfig::default(),
            mlp: MlpConfig::default(),
            time_encoding: TimeEncoding::Normalized,
            matmul_precision: MatmulPrecision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.minibatch_frames < 2 {
            return bad("minibatch_frames must be at least 2");
        }
        if self.window_stride < 1 {
            return bad("window_stride must be at least 1");
        }
        if self.early_stop_patience < 1 {
            return bad("early_stop_patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.early_stop_min_delta >= 0.0 && self.early_stop_min_delta.is_finite()) {
            return bad("early_stop_min_delta must be non-negative");
        }
        if matches!(self.subsequence_length, Some(n) if n < 2) {
            return bad("subsequence_length must be at least 2");
        }
        self.loss.validate()?;
        self.network_config().validate()
    }

    /// The network configuration actually trained.
    pub fn network_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: self.time_encoding.input_dim(),
            seed: self.seed,
            ..self.mlp
        }
    }

    /// Settings for the two-frame baseline: a 3-D input prior at the
    /// baseline's usual learning rate.
    pub fn nsfp_default() -> Self {
        Self {
            learning_rate: 8e-3,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::EarlyStopped => "early-stopped",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "completed" => Ok(Self::Completed),
            "early-stopped" => Ok(Self::EarlyStopped),
            other => Err(Error::InvalidArgument(format!("unknown stop reason `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// `key=value` lines describing the run, written as the export header.
    pub header: Vec<(String, String)>,
    pub epoch_losses: Vec<f64>,
    /// Per-epoch sums of each loss term.
    pub term_totals: Vec<BTreeMap<LossTerm, f64>>,
    /// One-based epoch with the lowest loss.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn best_loss(&self) -> f64 {
        self.epoch_losses[self.best_epoch - 1]
    }

    pub fn epochs_run(&self) -> usize {
        self.epoch_losses.len()
    }

    /// Header comments, `epoch,total_loss` rows and a stop-reason footer.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("epoch,total_loss\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            let _ = writeln!(out, "{},{:e}", i + 1, loss);
        }
        let _ = writeln!(out, "# best_epoch={}", self.best_epoch);
        let _ = writeln!(out, "# stop_reason={}", self.stop_reason.name());
        out
    }
}

/// `key=value` description of a configuration, mirroring the config file keys.
pub fn describe_config(config: &TrainConfig) -> Vec<(String, String)> {
    let net = config.network_config();
    let mut kv = vec![
        ("epochs", config.epochs.to_string()),
        ("learning_rate", format!("{:e}", config.learning_rate)),
        ("minibatch_frames", config.minibatch_frames.to_string()),
        ("window_stride", config.window_stride.to_string()),
        ("early_stop_patience", config.early_stop_patience.to_string()),
        ("early_stop_min_delta", format!("{:e}", config.early_stop_min_delta)),
        ("seed", config.seed.to_string()),
        (
            "subsequence_length",
            config.subsequence_length.map_or("none".into(), |n| n.to_string()),
        ),
        ("max_k", config.loss.max_k.to_string()),
        ("cycle_weight", format!("{:e}", config.loss.cycle_weight)),
        ("multistep", config.loss.enable_multistep.to_string()),
        ("cycle", config.loss.enable_cycle.to_string()),
        ("truncation_radius", format!("{:e}", config.loss.chamfer.truncation_radius)),
        ("symmetric", config.loss.chamfer.symmetric.to_string()),
        ("depth", net.depth.to_string()),
        ("hidden_width", net.hidden_width.to_string()),
        ("activation", net.activation.name().to_string()),
        ("time_encoding", config.time_encoding.name().to_string()),
        ("matmul_precision", config.matmul_precision.name().to_string()),
    ];
    if let Activation::Gaussian { sigma } = net.activation {
        kv.push(("gaussian_sigma", format!("{sigma:e}")));
    }
    if let TimeEncoding::Sinusoidal { frequencies } = config.time_encoding {
        kv.push(("time_frequencies", frequencies.to_string()));
    }
    kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Contiguous windows of `size` frames starting every `stride` frames
/// (clamped to `size`, so no frame is skipped). A final window is aligned to the end so every frame is covered; sequences
/// shorter than `size` form one window.
pub fn windows(num_frames: usize, size: usize, stride: usize) -> Vec<std::ops::Range<usize>> {
    if num_frames <= size {
        return vec![0..num_frames];
    }
    let last_start = num_frames - size;
    let mut starts: Vec<usize> = (0..=last_start).step_by(stride.clamp(1, size)).collect();
    if *starts.last().unwrap() != last_start {
        starts.push(last_start);
    }
    starts.into_iter().map(|s| s..s + size).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: MlpParams,
    pub log: TrainLog,
}

/// Snapshot of one finished epoch, passed to progress observers.
#[derive(Debug, Clone, Copy)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub best_epoch: usize,
    pub best_loss: f64,
}

pub fn fit(sequence: &PointCloudSequence, config: &TrainConfig) -> Result<FitResult> {
    fit_with_observer(sequence, config, |_| {})
}

pub fn fit_with_observer(
    sequence: &PointCloudSequence,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochSummary),
) -> Result<FitResult> {
    config.validate()?;
    let truncated;
    let sequence = match config.subsequence_length {
        Some(n) => {
            truncated = sequence.truncated(n)?;
            &truncated
        }
        None => sequence,
    };
    let targets = SequenceTargets::new(sequence)?;
    let timeline = targets.timeline.clone();
    let encoder = SpaceTimeEncoder::new(&timeline, config.time_encoding)?;
    let mut params = init_params(&config.network_config())?;
    let mut adam = AdamState::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut schedule = windows(sequence.len(), config.minibatch_frames, config.window_stride);

    let mut log = TrainLog {
        header: describe_config(config),
        epoch_losses: Vec::new(),
        term_totals: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::Completed,
    };
    let mut best_params = params.clone();
    let mut reference = f64::INFINITY;
    let mut stale = 0;

    for epoch in 1..=config.epochs {
        schedule.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut terms: BTreeMap<LossTerm, f64> = BTreeMap::new();
        for window in &schedule {
            let mut grads = params.zeros_like();
            for t in window.clone() {
                let mut tape = Tape::with_precision(config.matmul_precision);
                let nodes = params.register(&mut tape);
                let field = TapeNeuralField {
                    nodes,
                    encoder: encoder.clone(),
                };
                let loss = eulerflow_loss(&field, &mut tape, &targets, t, &config.loss)?;
                let g = backward(&tape, &field.nodes, loss.node)?;
                grads.add_scaled(&g, 1.0)?;
                epoch_loss += loss.breakdown.total;
                for (term, value) in loss.breakdown.terms {
                    *terms.entry(term).or_default() += value;
                }
            }
            adam_step(&mut params, &grads, &mut adam)?;
        }
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::NonFinite("training diverged"));
        }
        log.epoch_losses.push(epoch_loss);
        log.term_totals.push(terms);

        if log.best_epoch == 0 || epoch_loss < log.best_loss() {
            log.best_epoch = epoch;
            best_params = params.clone();
        }
        if epoch_loss < reference * (1.0 - config.early_stop_min_delta) {
            reference = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        observer(&EpochSummary {
            epoch,
            loss: epoch_loss,
            best_epoch: log.best_epoch,
            best_loss: log.best_loss(),
        });
        if stale >= config.early_stop_patience {
            log.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(FitResult {
        params: best_params,
        log,
    })
}

/// Two-frame baseline: fits fresh forward and backward 3-D input priors to
/// one pair and returns the forward flow on `source`.
pub fn fit_nsfp(source: &PointCloud, next: &PointCloud, config: &TrainConfig) -> Result<Vec<Vec3>> {
    Ok(fit_nsfp_logged(source, next, config)?.0)
}

pub fn fit_nsfp_logged(source: &PointCloud, next: &PointCloud, config: &TrainConfig) -> Result<(Vec<Vec3>, TrainLog)> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyCloud("source cloud"));
    }
    let target = Target::new(next)?;
    let base = MlpConfig {
        input_dim: 3,
        seed: config.seed,
        ..config.mlp
    };
    let backward_config = MlpConfig {
        seed: config.seed.wrapping_add(1),
        ..base
    };
    let mut fwd = init_params(&base)?;
    let mut bwd = init_params(&backward_config)?;
    let mut fwd_adam = AdamState::new(&fwd, config.learning_rate);
    let mut bwd_adam = AdamState::new(&bwd, config.learning_rate);
    let mut log = TrainLog {
        header: describe_config(config),
        epoch_losses: Vec::new(),
        term_totals: Vec::new(),
        best_epoch: 0,
        stop_reason: StopReason::Completed,
    };
    let mut best = fwd.clone();
    let mut reference = f64::INFINITY;
    let mut stale = 0;
    for step in 1..=config.epochs {
        let mut tape = Tape::with_precision(config.matmul_precision);
        let f_nodes = fwd.register(&mut tape);
        let b_nodes = bwd.register(&mut tape);
        let loss = nsfp_loss(&f_nodes, &b_nodes, &mut tape, source, &target, &config.loss.chamfer)?;
        let grads = tape.backward(loss.node)?;
        let gf = f_nodes.gradients(&grads, &tape);
        let gb = b_nodes.gradients(&grads, &tape);
        // The loss was measured at the parameters before this update.
        let value = loss.breakdown.total;
        if !value.is_finite() {
            return Err(Error::NonFinite("two-frame fit diverged"));
        }
        log.epoch_losses.push(value);
        log.term_totals.push(loss.breakdown.terms);
        if log.best_epoch == 0 || value < log.best_loss() {
            log.best_epoch = step;
            best = fwd.clone();
        }
        if value < reference * (1.0 - config.early_stop_min_delta) {
            reference = value;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= config.early_stop_patience {
            log.stop_reason = StopReason::EarlyStopped;
            break;
        }
        adam_step(&mut fwd, &gf, &mut fwd_adam)?;
        adam_step(&mut bwd, &gb, &mut bwd_adam)?;
    }
    let flow = best.evaluate(&crate::flow::cloud_to_matrix(source))?;
    Ok((rows_to_vecs(&flow), log))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationVariant {
    Full,
    NoMultistep,
    NoCycle,
    Subsequence(usize),
    Depth(usize),
    TimeEncoding(TimeEncoding),
    Activation(Activation),
}

impl AblationVariant {
    /// The fixed comparison grid.
    pub fn grid() -> Vec<Self> {
        vec![
            Self::Full,
            Self::NoMultistep,
            Self::NoCycle,
            Self::Subsequence(5),
            Self::Subsequence(20),
            Self::Depth(4),
            Self::Depth(8),
            Self::Depth(12),
            Self::Depth(18),
        ]
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoMultistep => c.loss.enable_multistep = false,
            Self::NoCycle => c.loss.enable_cycle = false,
            Self::Subsequence(n) => c.subsequence_length = Some(n),
            Self::Depth(d) => c.mlp.depth = d,
            Self::TimeEncoding(e) => c.time_encoding = e,
            Self::Activation(a) => c.mlp.activation = a,
        }
        c
    }

    pub fn name(self) -> String {
        match self {
            Self::Full => "full".into(),
            Self::NoMultistep => "no-multistep".into(),
            Self::NoCycle => "no-cycle".into(),
            Self::Subsequence(n) => format!("subsequence-{n}"),
            Self::Depth(d) => format!("depth-{d}"),
            Self::TimeEncoding(e) => format!("time-{}", e.name()),
            Self::Activation(a) => format!("activation-{}", a.name()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub fit: FitResult,
    pub report: MetricReport,
}

/// Trains the variant and scores its flow on the frames it was trained on.
pub fn run_ablation(
    sequence: &PointCloudSequence,
    base: &TrainConfig,
    variant: AblationVariant,
) -> Result<AblationOutcome> {
    if !sequence.has_ground_truth() {
        return Err(Error::InvalidArgument("ablation needs ground truth".into()));
    }
    let config = variant.apply(base);
    let fit = fit(sequence, &config)?;
    let evaluated = match config.subsequence_length {
        Some(n) => sequence.truncated(n)?,
        None => sequence.clone(),
    };
    let report = score(&fit.params, &evaluated)?;
    Ok(AblationOutcome { variant, fit, report })
}

/// Metrics of a fitted prior's flow on a sequence with ground truth.
pub fn score(params: &MlpParams, sequence: &PointCloudSequence) -> Result<MetricReport> {
    let field = NeuralField::new(params, &Timeline::of(sequence))?;
    let flow = extract_flow_field(&field, sequence)?;
    let samples = collect_samples(sequence, &flow)?;
    evaluate(&samples, &BucketSpec::default())
}
