//! Point-cloud containers, rigid poses and preprocessing.

use nalgebra::{Matrix3, Point3 as NPoint3, Vector3};

use crate::error::{Error, Result};

/// A position in meters.
pub type Point3 = NPoint3<f64>;
/// A displacement in meters (flow vectors are expressed per frame interval).
pub type Vec3 = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Ordered points. Flow vectors and ground truth are index-aligned with `points`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Per-point displacement by index-aligned vectors.
    pub fn displaced(&self, flow: &[Vec3]) -> Result<PointCloud> {
        if flow.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} flow vectors for {} points",
                flow.len(),
                self.len()
            )));
        }
        Ok(PointCloud::new(
            self.points.iter().zip(flow).map(|(p, f)| p + f).collect(),
        ))
    }
}

impl From<Vec<Point3>> for PointCloud {
    fn from(points: Vec<Point3>) -> Self {
        Self::new(points)
    }
}

/// Sensor-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHONORMAL_TOL || (rotation.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument(
                "pose rotation is not a proper orthonormal matrix".into(),
            ));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about +z by `yaw` radians followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major rotation followed by translation, as stored in manifests.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64; 12]) -> Result<Self> {
        Self::new(
            Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            Vec3::new(v[9], v[10], v[11]),
        )
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Ground-truth annotations, index-aligned with a frame's cloud.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Meters per frame interval.
    pub flow: Vec<Vec3>,
    pub class_id: Vec<i32>,
    pub valid: Vec<bool>,
    pub is_foreground: Vec<bool>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }

    pub fn check_len(&self, count: usize) -> Result<()> {
        let lens = [
            self.flow.len(),
            self.class_id.len(),
            self.valid.len(),
            self.is_foreground.len(),
        ];
        if lens.iter().any(|&l| l != count) {
            return Err(Error::ShapeMismatch(format!(
                "ground truth lengths {lens:?} for {count} points"
            )));
        }
        Ok(())
    }

    fn filter(&self, keep: &[bool]) -> GroundTruth {
        fn pick<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
            v.iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(x, _)| x.clone())
                .collect()
        }
        GroundTruth {
            flow: pick(&self.flow, keep),
            class_id: pick(&self.class_id, keep),
            valid: pick(&self.valid, keep),
            is_foreground: pick(&self.is_foreground, keep),
        }
    }
}

/// One observation, with the cloud already in the shared world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub cloud: PointCloud,
    pub timestamp: f64,
    pub ego_pose: RigidPose,
    pub gt: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSequence {
    pub name: String,
    frames: Vec<Frame>,
}

impl PointCloudSequence {
    pub fn new(name: impl Into<String>, frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        for (i, f) in frames.iter().enumerate() {
            if !f.timestamp.is_finite() {
                return Err(Error::NonFinite("timestamp"));
            }
            if !f.cloud.is_finite() {
                return Err(Error::NonFinite("point cloud"));
            }
            if let Some(gt) = &f.gt {
                gt.check_len(f.cloud.len())?;
            }
            if i > 0 && f.timestamp <= frames[i - 1].timestamp {
                return Err(Error::InvalidArgument(format!(
                    "timestamps not strictly increasing at frame {i}"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            frames,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> &Frame {
        &self.frames[index]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the last frame (N for N flow intervals).
    pub fn last_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    /// First `n` frames.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate a {}-frame sequence to {n} frames",
                self.len()
            )));
        }
        Self::new(self.name.clone(), self.frames[..n].to_vec())
    }

    /// Ground removal applied to every frame.
    pub fn without_ground(&self, ground_height: f64) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| remove_ground(f, ground_height))
            .collect::<Result<_>>()?;
        Self::new(self.name.clone(), frames)
    }

    pub fn has_ground_truth(&self) -> bool {
        self.frames[..self.last_index()].iter().all(|f| f.gt.is_some())
    }
}

pub fn apply_pose(cloud: &PointCloud, pose: &RigidPose) -> PointCloud {
    PointCloud::new(cloud.points.iter().map(|p| pose.transform_point(p)).collect())
}

/// Maps sensor-frame clouds into the world frame using their ego poses.
pub fn ego_compensate(
    clouds: &[PointCloud],
    poses: &[RigidPose],
    timestamps: &[f64],
) -> Result<Vec<Frame>> {
    if clouds.len() != poses.len() || clouds.len() != timestamps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} clouds, {} poses, {} timestamps",
            clouds.len(),
            poses.len(),
            timestamps.len()
        )));
    }
    Ok(clouds
        .iter()
        .zip(poses)
        .zip(timestamps)
        .map(|((cloud, pose), &timestamp)| Frame {
            cloud: apply_pose(cloud, pose),
            timestamp,
            ego_pose: *pose,
            gt: None,
        })
        .collect())
}

pub const DEFAULT_GROUND_HEIGHT: f64 = 0.2;

/// Drops points with `z <= ground_height`, filtering ground truth with the same mask.
pub fn remove_ground(frame: &Frame, ground_height: f64) -> Result<Frame> {
    if !ground_height.is_finite() {
        return Err(Error::NonFinite("ground height"));
    }
    let keep: Vec<bool> = frame.cloud.points.iter().map(|p| p.z > ground_height).collect();
    let cloud = PointCloud::new(
        frame
            .cloud
            .points
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect(),
    );
    Ok(Frame {
        cloud,
        timestamp: frame.timestamp,
        ego_pose: frame.ego_pose,
        gt: frame.gt.as_ref().map(|gt| gt.filter(&keep)),
    })
}
