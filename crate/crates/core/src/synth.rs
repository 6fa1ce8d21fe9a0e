//! Deterministic synthetic scenes with exact ground-truth flow.
//!
//! Background points are fixed in the world frame. Each mover is a box whose
//! surface is (by default) resampled every frame, so consecutive clouds share
//! no point-to-point correspondence. Ground truth is the rigid displacement of
//! each observed point over one interval, computed before sensor noise.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{ego_compensate, GroundTruth, Point3, PointCloud, PointCloudSequence, RigidPose, Vec3};

pub const BACKGROUND_CLASS: i32 = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundSpec {
    pub num_points: usize,
    /// Side length in meters of the square region around the origin.
    pub extent: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoverSpec {
    pub class_id: i32,
    /// Box side lengths in meters.
    pub dims: Vec3,
    /// Body-to-world pose at frame 0; the translation is the box centroid.
    pub initial_pose: RigidPose,
    /// Centroid displacement per frame.
    pub linear_velocity: Vec3,
    /// Rotation vector per frame (axis times angle), about the centroid.
    pub angular_velocity: Vec3,
    pub points_per_frame: usize,
}

impl MoverSpec {
    /// Body-to-world pose at frame `k`.
    pub fn pose_at(&self, k: usize) -> RigidPose {
        let k = k as f64;
        let spin = Rotation3::new(self.angular_velocity * k);
        let rotation = spin.matrix() * self.initial_pose.rotation();
        let translation = self.initial_pose.translation() + self.linear_velocity * k;
        RigidPose::new(rotation, translation).expect("composition of rotations stays orthonormal")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub num_frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub background: BackgroundSpec,
    pub movers: Vec<MoverSpec>,
    /// Ego translation per frame.
    pub ego_velocity: Vec3,
    pub resample_each_frame: bool,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// The standard benchmark scene: 20 frames at 10 Hz with a car and a
    /// pedestrian crossing a static background.
    pub fn desk_av() -> Self {
        Self {
            name: "desk-av".into(),
            num_frames: 20,
            frame_interval: 0.1,
            background: BackgroundSpec {
                num_points: 2000,
                extent: 40.0,
                z_min: 0.3,
                z_max: 4.0,
            },
            movers: vec![
                MoverSpec {
                    class_id: 1,
                    dims: Vec3::new(4.0, 2.0, 1.5),
                    initial_pose: RigidPose::from_translation(Vec3::new(-6.0, 3.0, 1.05)),
                    linear_velocity: Vec3::new(0.1, 0.0, 0.0),
                    angular_velocity: Vec3::zeros(),
                    points_per_frame: 300,
                },
                MoverSpec {
                    class_id: 2,
                    dims: Vec3::new(0.5, 0.5, 1.7),
                    initial_pose: RigidPose::from_translation(Vec3::new(5.0, -3.0, 1.15)),
                    linear_velocity: Vec3::new(0.0, 0.06, 0.0),
                    angular_velocity: Vec3::zeros(),
                    points_per_frame: 60,
                },
            ],
            ego_velocity: Vec3::new(0.1, 0.0, 0.0),
            resample_each_frame: true,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-av" => Ok(Self::desk_av()),
            other => Err(Error::InvalidArgument(format!("unknown scene preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("scene spec: {m}")));
        if self.num_frames < 2 {
            return bad("num_frames must be at least 2");
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return bad("frame_interval must be positive");
        }
        let b = &self.background;
        if b.num_points < 1 || !(b.extent > 0.0 && b.extent.is_finite()) || !(b.z_max >= b.z_min) {
            return bad("background needs points and a positive extent");
        }
        if !(b.z_min.is_finite() && b.z_max.is_finite()) {
            return bad("background height range must be finite");
        }
        for m in &self.movers {
            if m.points_per_frame < 1 {
                return bad("movers need at least one point per frame");
            }
            let finite = m.dims.iter().chain(m.linear_velocity.iter()).chain(m.angular_velocity.iter());
            if !finite.clone().all(|v| v.is_finite()) || m.dims.iter().any(|&d| d <= 0.0) {
                return bad("mover dimensions must be positive and velocities finite");
            }
        }
        if !self.ego_velocity.iter().all(|v| v.is_finite()) {
            return bad("ego velocity must be finite");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be non-negative");
        }
        Ok(())
    }
}

/// Sensor-frame clouds with their ego poses, before compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<RigidPose>,
    pub timestamps: Vec<f64>,
    pub ground_truth: Vec<GroundTruth>,
    /// Noise-free world positions, index-aligned with `clouds`.
    pub world: Vec<PointCloud>,
}

/// Uniform sample on the surface of an origin-centered box.
fn sample_box_surface(rng: &mut impl Rng, dims: &Vec3) -> Vec3 {
    let (a, b, c) = (dims.x, dims.y, dims.z);
    let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = 5;
    for (i, area) in areas.iter().enumerate() {
        if pick < *area {
            face = i;
            break;
        }
        pick -= area;
    }
    let mut u = || rng.gen_range(-0.5..0.5);
    let h = dims * 0.5;
    match face {
        0 => Vec3::new(h.x, u() * b, u() * c),
        1 => Vec3::new(-h.x, u() * b, u() * c),
        2 => Vec3::new(u() * a, h.y, u() * c),
        3 => Vec3::new(u() * a, -h.y, u() * c),
        4 => Vec3::new(u() * a, u() * b, h.z),
        _ => Vec3::new(u() * a, u() * b, -h.z),
    }
}

pub fn generate_raw(spec: &SceneSpec) -> Result<RawRecording> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let b = &spec.background;
    let half = b.extent / 2.0;
    let background: Vec<Point3> = (0..b.num_points)
        .map(|_| {
            Point3::new(
                rng.gen_range(-half..half),
                rng.gen_range(-half..half),
                if b.z_max > b.z_min { rng.gen_range(b.z_min..b.z_max) } else { b.z_min },
            )
        })
        .collect();
    let fixed_bodies: Vec<Vec<Vec3>> = spec
        .movers
        .iter()
        .map(|m| (0..m.points_per_frame).map(|_| sample_box_surface(&mut rng, &m.dims)).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut out = RawRecording {
        clouds: Vec::new(),
        poses: Vec::new(),
        timestamps: Vec::new(),
        ground_truth: Vec::new(),
        world: Vec::new(),
    };
    for k in 0..spec.num_frames {
        let mut points = background.clone();
        let mut gt = GroundTruth {
            flow: vec![Vec3::zeros(); points.len()],
            class_id: vec![BACKGROUND_CLASS; points.len()],
            valid: vec![true; points.len()],
            is_foreground: vec![false; points.len()],
        };
        for (m, fixed) in spec.movers.iter().zip(&fixed_bodies) {
            let now = m.pose_at(k);
            let next = m.pose_at(k + 1);
            for i in 0..m.points_per_frame {
                let body = if spec.resample_each_frame {
                    sample_box_surface(&mut rng, &m.dims)
                } else {
                    fixed[i]
                };
                let p = now.transform_point(&Point3::from(body));
                let q = next.transform_point(&Point3::from(body));
                points.push(p);
                gt.flow.push(q - p);
                gt.class_id.push(m.class_id);
                gt.valid.push(true);
                gt.is_foreground.push(true);
            }
        }
        let world = PointCloud::new(points);
        let ego = RigidPose::from_translation(spec.ego_velocity * k as f64);
        let to_sensor = ego.inverse();
        let mut sensor: Vec<Point3> = world.points.iter().map(|p| to_sensor.transform_point(p)).collect();
        if spec.noise_sigma > 0.0 {
            for p in &mut sensor {
                *p += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        out.clouds.push(PointCloud::new(sensor));
        out.poses.push(ego);
        out.timestamps.push(k as f64 * spec.frame_interval);
        out.ground_truth.push(gt);
        out.world.push(world);
    }
    Ok(out)
}

/// Generates the scene and ego-compensates it into the world frame.
pub fn generate(spec: &SceneSpec) -> Result<PointCloudSequence> {
    let raw = generate_raw(spec)?;
    let mut frames = ego_compensate(&raw.clouds, &raw.poses, &raw.timestamps)?;
    for (f, gt) in frames.iter_mut().zip(raw.ground_truth) {
        f.gt = Some(gt);
    }
    PointCloudSequence::new(spec.name.clone(), frames)
}
