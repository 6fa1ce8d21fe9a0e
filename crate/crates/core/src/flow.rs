//! Space-time-direction encoding, motion-field queries and Euler integration.
//!
//! A motion field maps a position at a frame time to its displacement over
//! one frame interval in the requested direction. Integration takes exactly
//! one step per observation interval and queries each step at the timestamp
//! of the frame the points currently sit on.

use ndarray::Array2;

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, PointCloudSequence, Vec3};
use crate::nn::{MlpNodes, MlpParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    pub fn reversed(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// Frame timestamps of a sequence, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    timestamps: Vec<f64>,
}

impl Timeline {
    pub fn new(timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.len() < 2 {
            return Err(Error::InvalidArgument("a timeline needs at least 2 frames".into()));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) || !timestamps.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidArgument("timestamps must be finite and strictly increasing".into()));
        }
        Ok(Self { timestamps })
    }

    pub fn of(sequence: &PointCloudSequence) -> Self {
        Self {
            timestamps: sequence.timestamps(),
        }
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn time(&self, frame: usize) -> f64 {
        self.timestamps[frame]
    }

    pub fn last_index(&self) -> usize {
        self.timestamps.len() - 1
    }

    pub fn frame_of(&self, t: f64) -> Result<usize> {
        self.timestamps
            .iter()
            .position(|&s| s == t)
            .ok_or(Error::NotAFrameTime(t))
    }

    /// Frame reached after `steps` steps from `start` in direction `d`.
    pub fn step_target(&self, start: usize, d: Direction, steps: usize) -> Result<usize> {
        let err = Error::OutOfSequence {
            start,
            steps,
            last: self.last_index(),
        };
        if start > self.last_index() {
            return Err(err);
        }
        match d {
            Direction::Forward if start + steps <= self.last_index() => Ok(start + steps),
            Direction::Backward if steps <= start => Ok(start - steps),
            _ => Err(err),
        }
    }
}

/// Affine map of `[t_min, t_max]` onto `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeNormalizer {
    pub t_min: f64,
    pub t_max: f64,
}

impl TimeNormalizer {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_max > t_min) || !t_min.is_finite() || !t_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time range [{t_min}, {t_max}] is empty"
            )));
        }
        Ok(Self { t_min, t_max })
    }

    pub fn normalize(&self, t: f64) -> f64 {
        2.0 * ((t - self.t_min) / (self.t_max - self.t_min)) - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeEncoding {
    /// The normalized time itself.
    #[default]
    Normalized,
    /// `(sin(2^i π t), cos(2^i π t))` for `i in 0..frequencies`.
    Sinusoidal { frequencies: usize },
}

pub const DEFAULT_SINUSOIDAL_FREQUENCIES: usize = 8;

impl TimeEncoding {
    pub fn feature_dim(self) -> usize {
        match self {
            TimeEncoding::Normalized => 1,
            TimeEncoding::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    /// Network input width: position, time features, direction.
    pub fn input_dim(self) -> usize {
        3 + self.feature_dim() + 1
    }

    pub fn from_input_dim(dim: usize) -> Result<Self> {
        match dim {
            5 => Ok(TimeEncoding::Normalized),
            d if d > 4 && (d - 4) % 2 == 0 => Ok(TimeEncoding::Sinusoidal {
                frequencies: (d - 4) / 2,
            }),
            d => Err(Error::InvalidArgument(format!(
                "no time encoding yields a {d}-wide network input"
            ))),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "normalized" => Ok(TimeEncoding::Normalized),
            "sinusoidal" => Ok(TimeEncoding::Sinusoidal {
                frequencies: DEFAULT_SINUSOIDAL_FREQUENCIES,
            }),
            other => Err(Error::InvalidArgument(format!("unknown time encoding `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TimeEncoding::Normalized => "normalized",
            TimeEncoding::Sinusoidal { .. } => "sinusoidal",
        }
    }

    fn push_features(self, tn: f64, out: &mut Vec<f64>) {
        match self {
            TimeEncoding::Normalized => out.push(tn),
            TimeEncoding::Sinusoidal { frequencies } => {
                for i in 0..frequencies {
                    let w = (1u64 << i) as f64 * std::f64::consts::PI * tn;
                    out.push(w.sin());
                    out.push(w.cos());
                }
            }
        }
    }
}

/// Builds network inputs `(x, y, z, time features, direction)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeEncoder {
    pub normalizer: TimeNormalizer,
    pub encoding: TimeEncoding,
    lo: f64,
    hi: f64,
}

impl SpaceTimeEncoder {
    /// Accepts times up to one frame interval beyond either end of `timeline`.
    pub fn new(timeline: &Timeline, encoding: TimeEncoding) -> Result<Self> {
        let ts = timeline.timestamps();
        let last = ts.len() - 1;
        let normalizer = TimeNormalizer::new(ts[0], ts[last])?;
        Ok(Self {
            normalizer,
            encoding,
            lo: ts[0] - (ts[1] - ts[0]),
            hi: ts[last] + (ts[last] - ts[last - 1]),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoding.input_dim()
    }

    /// Time features followed by the direction sign.
    pub fn features(&self, t: f64, d: Direction) -> Result<Vec<f64>> {
        if !(t >= self.lo && t <= self.hi) {
            return Err(Error::TimeOutOfRange {
                time: t,
                lo: self.lo,
                hi: self.hi,
            });
        }
        let mut out = Vec::with_capacity(self.encoding.feature_dim() + 1);
        self.encoding.push_features(self.normalizer.normalize(t), &mut out);
        out.push(d.sign());
        Ok(out)
    }

    pub fn encode(&self, position: &Point3, t: f64, d: Direction) -> Result<Vec<f64>> {
        let mut out = vec![position.x, position.y, position.z];
        out.extend(self.features(t, d)?);
        Ok(out)
    }

    pub fn encode_cloud(&self, cloud: &PointCloud, t: f64, d: Direction) -> Result<Matrix> {
        let features = self.features(t, d)?;
        let width = 3 + features.len();
        let mut m = Array2::zeros((cloud.len(), width));
        for (mut row, p) in m.rows_mut().into_iter().zip(&cloud.points) {
            row[0] = p.x;
            row[1] = p.y;
            row[2] = p.z;
            for (j, f) in features.iter().enumerate() {
                row[3 + j] = *f;
            }
        }
        Ok(m)
    }
}

/// Displacement over one frame interval, queried at frame time `t`.
pub trait MotionField {
    fn query(&self, cloud: &PointCloud, t: f64, d: Direction) -> Result<Vec<Vec3>>;
}

/// The same field recorded on a tape; `positions` is an `n × 3` node and the
/// result is the `n × 3` displacement node.
pub trait TapeMotionField {
    fn record(&self, tape: &mut Tape, positions: NodeId, t: f64, d: Direction) -> Result<NodeId>;
}

/// A trained (or initialized) prior together with its sequence encoder.
#[derive(Debug, Clone)]
pub struct NeuralField<'a> {
    pub params: &'a MlpParams,
    pub encoder: SpaceTimeEncoder,
}

impl<'a> NeuralField<'a> {
    pub fn new(params: &'a MlpParams, timeline: &Timeline) -> Result<Self> {
        let encoding = TimeEncoding::from_input_dim(params.config.input_dim)?;
        Ok(Self {
            params,
            encoder: SpaceTimeEncoder::new(timeline, encoding)?,
        })
    }
}

impl MotionField for NeuralField<'_> {
    fn query(&self, cloud: &PointCloud, t: f64, d: Direction) -> Result<Vec<Vec3>> {
        let input = self.encoder.encode_cloud(cloud, t, d)?;
        let out = self.params.evaluate(&input)?;
        Ok(rows_to_vecs(&out))
    }
}

/// [`MlpNodes`] plus encoder, for loss construction.
#[derive(Debug, Clone)]
pub struct TapeNeuralField {
    pub nodes: MlpNodes,
    pub encoder: SpaceTimeEncoder,
}

impl TapeMotionField for TapeNeuralField {
    fn record(&self, tape: &mut Tape, positions: NodeId, t: f64, d: Direction) -> Result<NodeId> {
        let n = tape.value(positions).nrows();
        let features = self.encoder.features(t, d)?;
        let width = features.len();
        let cols = Array2::from_shape_fn((n, width), |(_, j)| features[j]);
        let cols = tape.constant(cols);
        let input = tape.concat_cols(positions, cols);
        self.nodes.forward(tape, input)
    }
}

/// Displaces every point by a fixed vector per direction; bypasses any network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField {
    pub forward: Vec3,
    pub backward: Vec3,
}

impl ConstantField {
    /// `+v` forward and `−v` backward: an exact inverse pair.
    pub fn symmetric(v: Vec3) -> Self {
        Self {
            forward: v,
            backward: -v,
        }
    }

    fn vector(&self, d: Direction) -> Vec3 {
        match d {
            Direction::Forward => self.forward,
            Direction::Backward => self.backward,
        }
    }
}

impl MotionField for ConstantField {
    fn query(&self, cloud: &PointCloud, _t: f64, d: Direction) -> Result<Vec<Vec3>> {
        Ok(vec![self.vector(d); cloud.len()])
    }
}

impl TapeMotionField for ConstantField {
    fn record(&self, tape: &mut Tape, positions: NodeId, _t: f64, d: Direction) -> Result<NodeId> {
        let n = tape.value(positions).nrows();
        let v = self.vector(d);
        Ok(tape.constant(Array2::from_shape_fn((n, 3), |(_, j)| v[j])))
    }
}

/// A zero field.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl MotionField for ZeroField {
    fn query(&self, cloud: &PointCloud, _t: f64, _d: Direction) -> Result<Vec<Vec3>> {
        Ok(vec![Vec3::zeros(); cloud.len()])
    }
}

pub(crate) fn rows_to_vecs(m: &Matrix) -> Vec<Vec3> {
    m.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
}

pub fn cloud_to_matrix(cloud: &PointCloud) -> Matrix {
    Array2::from_shape_fn((cloud.len(), 3), |(i, j)| cloud.points[i][j])
}

pub fn matrix_to_cloud(m: &Matrix) -> PointCloud {
    PointCloud::new(m.rows().into_iter().map(|r| Point3::new(r[0], r[1], r[2])).collect())
}

/// Queries the prior once per point.
pub fn query_flow(
    params: &MlpParams,
    timeline: &Timeline,
    cloud: &PointCloud,
    t: f64,
    d: Direction,
) -> Result<Vec<Vec3>> {
    NeuralField::new(params, timeline)?.query(cloud, t, d)
}

/// `k` Euler steps starting on the frame with timestamp `t_start`.
pub fn euler_integrate(
    field: &impl MotionField,
    timeline: &Timeline,
    cloud: &PointCloud,
    t_start: f64,
    d: Direction,
    k: usize,
) -> Result<PointCloud> {
    let start = timeline.frame_of(t_start)?;
    let mut states = euler_rollout(field, timeline, cloud, start, d, k)?;
    Ok(states.pop().expect("k >= 1 states"))
}

/// Positions after each of `k` steps from frame `start`.
pub fn euler_rollout(
    field: &impl MotionField,
    timeline: &Timeline,
    cloud: &PointCloud,
    start: usize,
    d: Direction,
    k: usize,
) -> Result<Vec<PointCloud>> {
    if k == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    timeline.step_target(start, d, k)?;
    let mut current = cloud.clone();
    let mut states = Vec::with_capacity(k);
    for i in 0..k {
        let frame = timeline.step_target(start, d, i)?;
        let delta = field.query(&current, timeline.time(frame), d)?;
        current = current.displaced(&delta)?;
        states.push(current.clone());
    }
    Ok(states)
}

/// Tape version of [`euler_rollout`]: the position node after each step.
pub fn euler_rollout_on_tape(
    field: &impl TapeMotionField,
    tape: &mut Tape,
    timeline: &Timeline,
    positions: NodeId,
    start: usize,
    d: Direction,
    k: usize,
) -> Result<Vec<NodeId>> {
    if k == 0 {
        return Err(Error::InvalidArgument("integration needs at least one step".into()));
    }
    timeline.step_target(start, d, k)?;
    let mut current = positions;
    let mut states = Vec::with_capacity(k);
    for i in 0..k {
        let frame = timeline.step_target(start, d, i)?;
        let delta = field.record(tape, current, timeline.time(frame), d)?;
        current = tape.add(current, delta);
        states.push(current);
    }
    Ok(states)
}

/// Per-frame residual vectors, index-aligned with each frame's cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowField {
    pub frames: Vec<Vec<Vec3>>,
}

impl FlowField {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One forward step from every frame but the last, minus the start positions.
pub fn extract_flow_field(
    field: &impl MotionField,
    sequence: &PointCloudSequence,
) -> Result<FlowField> {
    let timeline = Timeline::of(sequence);
    let mut frames = Vec::with_capacity(sequence.last_index());
    for frame in &sequence.frames()[..sequence.last_index()] {
        let moved = euler_integrate(field, &timeline, &frame.cloud, frame.timestamp, Direction::Forward, 1)?;
        frames.push(
            moved
                .points
                .iter()
                .zip(&frame.cloud.points)
                .map(|(a, b)| a - b)
                .collect(),
        );
    }
    Ok(FlowField { frames })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub samples: Vec<(f64, Point3)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Integrates a single point frame by frame from `t_start` to `t_end`,
/// recording every visited position.
pub fn extract_track(
    field: &impl MotionField,
    timeline: &Timeline,
    start: Point3,
    t_start: f64,
    t_end: f64,
) -> Result<Trajectory> {
    let from = timeline.frame_of(t_start)?;
    let to = timeline.frame_of(t_end)?;
    if from == to {
        return Err(Error::InvalidArgument("track start and end coincide".into()));
    }
    let (d, steps) = if to > from {
        (Direction::Forward, to - from)
    } else {
        (Direction::Backward, from - to)
    };
    let start_cloud = PointCloud::new(vec![start]);
    let states = euler_rollout(field, timeline, &start_cloud, from, d, steps)?;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push((t_start, start));
    for (i, s) in states.iter().enumerate() {
        let frame = timeline.step_target(from, d, i + 1)?;
        samples.push((timeline.time(frame), s.points[0]));
    }
    Ok(Trajectory { samples })
}
