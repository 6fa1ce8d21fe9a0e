//! Truncated Chamfer distance and the sequence objectives built on it.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::flow::{cloud_to_matrix, euler_rollout_on_tape, Direction, TapeMotionField, Timeline};
use crate::geometry::{PointCloud, PointCloudSequence};
use crate::neighbors::NeighborIndex;
use crate::nn::MlpNodes;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChamferConfig {
    /// Per-point distances above this radius contribute zero.
    pub truncation_radius: f64,
    pub symmetric: bool,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self {
            truncation_radius: 2.0,
            symmetric: true,
        }
    }
}

impl ChamferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.truncation_radius > 0.0 && self.truncation_radius.is_finite()) {
            return Err(Error::InvalidArgument("truncation radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub max_k: usize,
    pub cycle_weight: f64,
    pub enable_multistep: bool,
    pub enable_cycle: bool,
    pub chamfer: ChamferConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            max_k: 3,
            cycle_weight: 0.01,
            enable_multistep: true,
            enable_cycle: true,
            chamfer: ChamferConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_k < 1 {
            return Err(Error::InvalidArgument("max_k must be at least 1".into()));
        }
        if !(self.cycle_weight >= 0.0 && self.cycle_weight.is_finite()) {
            return Err(Error::InvalidArgument("cycle weight must be non-negative".into()));
        }
        self.chamfer.validate()
    }

    /// Largest integration horizon actually used.
    pub fn horizon(&self) -> usize {
        if self.enable_multistep {
            self.max_k
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossTerm {
    Chamfer { direction: Direction, k: usize },
    Cycle,
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossTerm::Chamfer { direction, k } => write!(f, "chamfer_{}_{k}", direction.name()),
            LossTerm::Cycle => write!(f, "cycle"),
        }
    }
}

/// Scalar loss with its additive terms. The cycle entry already includes its weight.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: BTreeMap<LossTerm, f64>,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        self.terms.get(&term).copied()
    }

    pub fn term_sum(&self) -> f64 {
        self.terms.values().sum()
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        for (k, v) in &other.terms {
            *self.terms.entry(*k).or_insert(0.0) += v;
        }
    }
}

/// A loss recorded on a tape.
#[derive(Debug, Clone)]
pub struct RecordedLoss {
    pub node: NodeId,
    pub breakdown: LossBreakdown,
}

/// Nearest-neighbor correspondences of one Chamfer evaluation; `None` marks a
/// truncated pair.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChamferMatches {
    pub forward: Vec<Option<usize>>,
    pub reverse: Vec<Option<usize>>,
}

/// Either records correspondences as they are computed or replays earlier
/// ones, which freezes the argmin for finite-difference probes.
#[derive(Debug, Clone, Default)]
pub struct MatchLog {
    entries: Vec<ChamferMatches>,
    replay: Option<usize>,
}

impl MatchLog {
    pub fn recording() -> Self {
        Self::default()
    }

    /// Switches to replay from the first recorded entry.
    pub fn into_replay(mut self) -> Self {
        self.replay = Some(0);
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A target cloud with its search index, built once and reused across steps.
#[derive(Debug, Clone)]
pub struct Target {
    cloud: PointCloud,
    index: NeighborIndex,
}

impl Target {
    pub fn new(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud("chamfer target"));
        }
        Ok(Self {
            cloud: cloud.clone(),
            index: NeighborIndex::build(cloud)?,
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }
}

fn match_within(index: &NeighborIndex, q: &[f64; 3], r2: f64) -> Option<usize> {
    let n = index.nearest_raw(q);
    (n.squared_distance <= r2).then_some(n.index)
}

fn compute_matches(pred: &Array2<f64>, target: &Target, config: &ChamferConfig) -> Result<ChamferMatches> {
    let r2 = config.truncation_radius * config.truncation_radius;
    let forward = pred
        .rows()
        .into_iter()
        .map(|r| match_within(&target.index, &[r[0], r[1], r[2]], r2))
        .collect();
    let reverse = if config.symmetric {
        let pred_points = pred.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
        let pred_index = NeighborIndex::from_points(pred_points)?;
        target
            .cloud
            .points
            .iter()
            .map(|p| match_within(&pred_index, &[p.x, p.y, p.z], r2))
            .collect()
    } else {
        Vec::new()
    };
    Ok(ChamferMatches { forward, reverse })
}

/// Truncated Chamfer distance from the `n × 3` node `predicted` to `target`.
///
/// Mean over predicted points of the squared distance to the nearest target
/// point, zero beyond the truncation radius; when symmetric, plus the same
/// mean over target points. Gradients reach only the predicted positions.
pub fn truncated_chamfer(
    tape: &mut Tape,
    predicted: NodeId,
    target: &Target,
    config: &ChamferConfig,
) -> Result<NodeId> {
    truncated_chamfer_logged(tape, predicted, target, config, None)
}

pub fn truncated_chamfer_logged(
    tape: &mut Tape,
    predicted: NodeId,
    target: &Target,
    config: &ChamferConfig,
    log: Option<&mut MatchLog>,
) -> Result<NodeId> {
    config.validate()?;
    let pred = tape.value(predicted);
    if pred.nrows() == 0 {
        return Err(Error::EmptyCloud("chamfer prediction"));
    }
    if pred.ncols() != 3 {
        return Err(Error::ShapeMismatch("chamfer expects n × 3 positions".into()));
    }
    let matches = match log {
        Some(log) => match log.replay {
            Some(cursor) => {
                let m = log.entries.get(cursor).cloned().ok_or_else(|| {
                    Error::InvalidArgument("match log exhausted during replay".into())
                })?;
                log.replay = Some(cursor + 1);
                m
            }
            None => {
                let m = compute_matches(pred, target, config)?;
                log.entries.push(m.clone());
                m
            }
        },
        None => compute_matches(pred, target, config)?,
    };
    let n = pred.nrows();
    if matches.forward.len() != n {
        return Err(Error::ShapeMismatch("replayed matches do not fit the prediction".into()));
    }

    // Predicted → target.
    let tgt = &target.cloud.points;
    let anchors = Array2::from_shape_fn((n, 3), |(i, j)| matches.forward[i].map_or(0.0, |m| tgt[m][j]));
    let weights: Vec<f64> = matches
        .forward
        .iter()
        .map(|m| if m.is_some() { 1.0 / n as f64 } else { 0.0 })
        .collect();
    let anchors = tape.constant(anchors);
    let diff = tape.sub(predicted, anchors);
    let sq = tape.row_squared_norm(diff);
    let forward = tape.weighted_sum(sq, weights);
    if !config.symmetric {
        return Ok(forward);
    }

    // Target → predicted.
    let m = tgt.len();
    if matches.reverse.len() != m {
        return Err(Error::ShapeMismatch("replayed matches do not fit the target".into()));
    }
    let rows: Vec<usize> = matches.reverse.iter().map(|r| r.unwrap_or(0)).collect();
    let weights: Vec<f64> = matches
        .reverse
        .iter()
        .map(|r| if r.is_some() { 1.0 / m as f64 } else { 0.0 })
        .collect();
    let gathered = tape.gather_rows(predicted, rows);
    let targets = tape.constant(cloud_to_matrix(&target.cloud));
    let diff = tape.sub(gathered, targets);
    let sq = tape.row_squared_norm(diff);
    let reverse = tape.weighted_sum(sq, weights);
    Ok(tape.add(forward, reverse))
}

/// Plain evaluation of [`truncated_chamfer`].
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud, config: &ChamferConfig) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyCloud("chamfer prediction"));
    }
    let target = Target::new(b)?;
    let mut tape = Tape::new();
    let pred = tape.constant(cloud_to_matrix(a));
    let node = truncated_chamfer(&mut tape, pred, &target, config)?;
    Ok(tape.scalar(node))
}

/// Frames, timeline and prebuilt Chamfer targets of a sequence.
#[derive(Debug, Clone)]
pub struct SequenceTargets {
    pub timeline: Timeline,
    targets: Vec<Target>,
}

impl SequenceTargets {
    pub fn new(sequence: &PointCloudSequence) -> Result<Self> {
        Ok(Self {
            timeline: Timeline::of(sequence),
            targets: sequence
                .frames()
                .iter()
                .map(|f| Target::new(&f.cloud))
                .collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self, frame: usize) -> &Target {
        &self.targets[frame]
    }

    pub fn last_index(&self) -> usize {
        self.targets.len() - 1
    }
}

/// Multi-step forward/backward Chamfer plus forward-backward cycle
/// consistency for the points of frame `t`. Terms whose target frame falls
/// outside the sequence are omitted.
pub fn eulerflow_loss(
    field: &impl TapeMotionField,
    tape: &mut Tape,
    targets: &SequenceTargets,
    t: usize,
    config: &LossConfig,
) -> Result<RecordedLoss> {
    eulerflow_loss_logged(field, tape, targets, t, config, None)
}

pub fn eulerflow_loss_logged(
    field: &impl TapeMotionField,
    tape: &mut Tape,
    targets: &SequenceTargets,
    t: usize,
    config: &LossConfig,
    mut log: Option<&mut MatchLog>,
) -> Result<RecordedLoss> {
    config.validate()?;
    let last = targets.last_index();
    if t > last {
        return Err(Error::InvalidArgument(format!("frame {t} outside 0..={last}")));
    }
    let timeline = &targets.timeline;
    let start = tape.constant(cloud_to_matrix(targets.target(t).cloud()));
    let horizon = config.horizon();
    let mut nodes = Vec::new();
    let mut terms = BTreeMap::new();
    let mut forward_first = None;

    for d in [Direction::Forward, Direction::Backward] {
        let reach = match d {
            Direction::Forward => (last - t).min(horizon),
            Direction::Backward => t.min(horizon),
        };
        if reach == 0 {
            continue;
        }
        let states = euler_rollout_on_tape(field, tape, timeline, start, t, d, reach)?;
        if d == Direction::Forward {
            forward_first = Some(states[0]);
        }
        for (i, &state) in states.iter().enumerate() {
            let k = i + 1;
            let target = targets.target(timeline.step_target(t, d, k)?);
            let node = truncated_chamfer_logged(tape, state, target, &config.chamfer, log.as_deref_mut())?;
            terms.insert(LossTerm::Chamfer { direction: d, k }, tape.scalar(node));
            nodes.push(node);
        }
    }

    if config.enable_cycle {
        if let Some(moved) = forward_first {
            let back = euler_rollout_on_tape(field, tape, timeline, moved, t + 1, Direction::Backward, 1)?;
            let residual = tape.sub(back[0], start);
            let norms = tape.row_norm(residual);
            let n = norms_len(tape, norms);
            let mean = tape.weighted_sum(norms, vec![1.0 / n as f64; n]);
            let weighted = tape.scale(mean, config.cycle_weight);
            terms.insert(LossTerm::Cycle, tape.scalar(weighted));
            nodes.push(weighted);
        }
    }

    let node = tape.add_all(&nodes);
    Ok(RecordedLoss {
        node,
        breakdown: LossBreakdown {
            total: tape.scalar(node),
            terms,
        },
    })
}

fn norms_len(tape: &Tape, node: NodeId) -> usize {
    tape.value(node).nrows()
}

/// Two-frame objective with separate 3-D input forward and backward priors:
/// Chamfer of the forward-displaced cloud plus the mean cycle residual.
pub fn nsfp_loss(
    forward_net: &MlpNodes,
    backward_net: &MlpNodes,
    tape: &mut Tape,
    source: &PointCloud,
    next: &Target,
    config: &ChamferConfig,
) -> Result<RecordedLoss> {
    if source.is_empty() {
        return Err(Error::EmptyCloud("source cloud"));
    }
    for net in [forward_net, backward_net] {
        if net.config().input_dim != 3 || net.config().output_dim != 3 {
            return Err(Error::ShapeMismatch("two-frame priors map 3-D positions to 3-D flow".into()));
        }
    }
    let x = tape.constant(cloud_to_matrix(source));
    let f_plus = forward_net.forward(tape, x)?;
    let moved = tape.add(x, f_plus);
    let chamfer = truncated_chamfer(tape, moved, next, config)?;
    let f_minus = backward_net.forward(tape, moved)?;
    let back = tape.add(moved, f_minus);
    let residual = tape.sub(back, x);
    let norms = tape.row_norm(residual);
    let n = source.len();
    let cycle = tape.weighted_sum(norms, vec![1.0 / n as f64; n]);
    let node = tape.add(chamfer, cycle);
    let mut terms = BTreeMap::new();
    terms.insert(
        LossTerm::Chamfer {
            direction: Direction::Forward,
            k: 1,
        },
        tape.scalar(chamfer),
    );
    terms.insert(LossTerm::Cycle, tape.scalar(cycle));
    Ok(RecordedLoss {
        node,
        breakdown: LossBreakdown {
            total: tape.scalar(node),
            terms,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ConstantField;
    use crate::geometry::{Frame, Point3, RigidPose, Vec3};
    use crate::nn::{MlpConfig, MlpParams};

    fn pc(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect())
    }

    fn one_way() -> ChamferConfig {
        ChamferConfig {
            symmetric: false,
            ..Default::default()
        }
    }

    #[test]
    fn identical_clouds_have_zero_distance() {
        let a = pc(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        assert_eq!(chamfer_distance(&a, &a, &ChamferConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_pair() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b, &one_way()).unwrap(), 1.0);
        assert_eq!(chamfer_distance(&a, &b, &ChamferConfig::default()).unwrap(), 2.0);
    }

    #[test]
    fn pairs_beyond_radius_contribute_zero() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[3.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b, &ChamferConfig::default()).unwrap(), 0.0);
        // Exactly at the radius still counts.
        let b = pc(&[[2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&a, &b, &one_way()).unwrap(), 4.0);
    }

    #[test]
    fn mean_reduction_and_truncated_gradient() {
        // Two predicted points: one 1 m from the target, one 5 m away.
        let target = Target::new(&pc(&[[0.0, 0.0, 0.0]])).unwrap();
        let mut tape = Tape::new();
        let pred = tape.param(cloud_to_matrix(&pc(&[[1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])));
        let loss = truncated_chamfer(&mut tape, pred, &target, &one_way()).unwrap();
        assert_eq!(tape.scalar(loss), 0.5);
        let g = tape.backward(loss).unwrap();
        let g = g.get(pred).unwrap();
        assert_eq!(g.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_clouds_rejected() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        assert!(chamfer_distance(&PointCloud::default(), &a, &ChamferConfig::default()).is_err());
        assert!(chamfer_distance(&a, &PointCloud::default(), &ChamferConfig::default()).is_err());
        assert!(ChamferConfig { truncation_radius: 0.0, symmetric: true }.validate().is_err());
    }

    fn sequence(clouds: Vec<PointCloud>) -> PointCloudSequence {
        PointCloudSequence::new(
            "test",
            clouds
                .into_iter()
                .enumerate()
                .map(|(i, cloud)| Frame {
                    cloud,
                    timestamp: i as f64 * 0.1,
                    ego_pose: RigidPose::identity(),
                    gt: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn static_scene_with_zero_field_is_exact() {
        let c = pc(&[[0.0, 0.0, 0.5], [1.0, 1.0, 1.0]]);
        let seq = sequence(vec![c.clone(); 5]);
        let targets = SequenceTargets::new(&seq).unwrap();
        let field = ConstantField::symmetric(Vec3::zeros());
        for t in 0..5 {
            let mut tape = Tape::new();
            let loss = eulerflow_loss(&field, &mut tape, &targets, t, &LossConfig::default()).unwrap();
            assert_eq!(loss.breakdown.total, 0.0);
        }
    }

    #[test]
    fn term_presence_and_boundary_clipping() {
        let c = pc(&[[0.0, 0.0, 0.5]]);
        let seq = sequence(vec![c; 6]);
        let targets = SequenceTargets::new(&seq).unwrap();
        let field = ConstantField::symmetric(Vec3::new(0.1, 0.0, 0.0));
        let keys = |t: usize, cfg: &LossConfig| {
            let mut tape = Tape::new();
            let loss = eulerflow_loss(&field, &mut tape, &targets, t, cfg).unwrap();
            assert!((loss.breakdown.total - loss.breakdown.term_sum()).abs() <= 1e-12);
            loss.breakdown.terms.keys().copied().collect::<Vec<_>>()
        };
        let fwd = |k| LossTerm::Chamfer { direction: Direction::Forward, k };
        let bwd = |k| LossTerm::Chamfer { direction: Direction::Backward, k };
        let full = LossConfig::default();
        assert_eq!(keys(0, &full), vec![fwd(1), fwd(2), fwd(3), LossTerm::Cycle]);
        assert_eq!(keys(1, &full), vec![fwd(1), fwd(2), fwd(3), bwd(1), LossTerm::Cycle]);
        assert_eq!(keys(4, &full), vec![fwd(1), bwd(1), bwd(2), bwd(3), LossTerm::Cycle]);
        assert_eq!(keys(5, &full), vec![bwd(1), bwd(2), bwd(3)]);
        let no_multi = LossConfig { enable_multistep: false, ..full };
        assert_eq!(keys(2, &no_multi), vec![fwd(1), bwd(1), LossTerm::Cycle]);
        let no_cycle = LossConfig { enable_cycle: false, ..full };
        assert_eq!(keys(2, &no_cycle), vec![fwd(1), fwd(2), fwd(3), bwd(1), bwd(2)]);
        assert!(eulerflow_loss(&field, &mut Tape::new(), &targets, 6, &full).is_err());
    }

    #[test]
    fn nsfp_zero_networks_on_identical_frames() {
        let cfg = MlpConfig { input_dim: 3, depth: 2, hidden_width: 8, ..Default::default() };
        let f = MlpParams::zeros(&cfg).unwrap();
        let b = MlpParams::zeros(&cfg).unwrap();
        let c = pc(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 1.0]]);
        let mut tape = Tape::new();
        let (fn_, bn) = (f.register(&mut tape), b.register(&mut tape));
        let loss = nsfp_loss(&fn_, &bn, &mut tape, &c, &Target::new(&c).unwrap(), &ChamferConfig::default()).unwrap();
        assert_eq!(loss.breakdown.total, 0.0);
    }

    #[test]
    fn nsfp_perfect_flow_and_inverse() {
        // Output bias alone carries the shift; zero weights make it exact.
        let cfg = MlpConfig { input_dim: 3, depth: 1, hidden_width: 4, ..Default::default() };
        let mut f = MlpParams::zeros(&cfg).unwrap();
        let mut b = MlpParams::zeros(&cfg).unwrap();
        f.layers[1].bias = ndarray::array![[0.5, -0.25, 0.0]];
        b.layers[1].bias = ndarray::array![[-0.5, 0.25, 0.0]];
        let c = pc(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 3.0, 1.0]]);
        let shifted = c.displaced(&vec![Vec3::new(0.5, -0.25, 0.0); 3]).unwrap();
        let mut tape = Tape::new();
        let (fn_, bn) = (f.register(&mut tape), b.register(&mut tape));
        let loss = nsfp_loss(&fn_, &bn, &mut tape, &c, &Target::new(&shifted).unwrap(), &ChamferConfig::default()).unwrap();
        assert_eq!(loss.breakdown.total, 0.0);
    }
}
