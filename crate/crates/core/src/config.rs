//! Flat `key=value` configuration files.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Unknown or repeated keys are errors. Vectors are written as three
//! space-separated numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::MatmulPrecision;
use crate::error::{Error, Result};
use crate::flow::TimeEncoding;
use crate::geometry::{RigidPose, Vec3};
use crate::nn::Activation;
use crate::synth::{MoverSpec, SceneSpec};
use crate::trainer::{describe_config, TrainConfig};

/// Parsed assignments with the line each came from.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}", i + 1), "expected key=value"))?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::format(path, format!("line {}", i + 1), "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::format(path, key, "repeated key"));
            }
        }
        Ok(Self { entries })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Consumes keys from a [`KeyValues`], so leftovers can be reported.
struct Fields<'a> {
    entries: BTreeMap<String, (usize, String)>,
    path: &'a Path,
}

impl<'a> Fields<'a> {
    fn new(kv: KeyValues, path: &'a Path) -> Self {
        Self {
            entries: kv.entries,
            path,
        }
    }

    fn error(&self, key: &str, message: impl Into<String>) -> Error {
        Error::format(self.path, key, message)
    }

    fn take_with<T>(&mut self, key: &str, parse: impl FnOnce(&str) -> Option<T>) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, value)) => parse(&value)
                .map(Some)
                .ok_or_else(|| self.error(key, format!("line {line}: cannot parse `{value}`"))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take_with(key, |s| s.parse().ok())? {
            *slot = v;
        }
        Ok(())
    }

    fn set_f64(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.take_with(key, |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))? {
            *slot = v;
        }
        Ok(())
    }

    fn set_vec3(&mut self, key: &str, slot: &mut Vec3) -> Result<()> {
        if let Some(v) = self.take_with(key, parse_vec3)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::format(self.path, key, format!("line {line}: unknown key"))),
        }
    }
}

fn parse_vec3(s: &str) -> Option<Vec3> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vec3::new(v[0], v[1], v[2]))
}

fn vec3_text(v: &Vec3) -> String {
    format!("{:?} {:?} {:?}", v.x, v.y, v.z)
}

/// Applies a training config file on top of `base`.
pub fn parse_train_config(text: &str, path: &Path, base: &TrainConfig) -> Result<TrainConfig> {
    let mut f = Fields::new(KeyValues::parse(text, path)?, path);
    let mut c = base.clone();
    f.set("epochs", &mut c.epochs)?;
    f.set_f64("learning_rate", &mut c.learning_rate)?;
    f.set("minibatch_frames", &mut c.minibatch_frames)?;
    f.set("window_stride", &mut c.window_stride)?;
    f.set("early_stop_patience", &mut c.early_stop_patience)?;
    f.set_f64("early_stop_min_delta", &mut c.early_stop_min_delta)?;
    f.set("seed", &mut c.seed)?;
    if let Some(v) = f.take_with("subsequence_length", |s| match s {
        "none" => Some(None),
        s => s.parse().ok().map(Some),
    })? {
        c.subsequence_length = v;
    }
    f.set("max_k", &mut c.loss.max_k)?;
    f.set_f64("cycle_weight", &mut c.loss.cycle_weight)?;
    f.set("multistep", &mut c.loss.enable_multistep)?;
    f.set("cycle", &mut c.loss.enable_cycle)?;
    f.set_f64("truncation_radius", &mut c.loss.chamfer.truncation_radius)?;
    f.set("symmetric", &mut c.loss.chamfer.symmetric)?;
    f.set("depth", &mut c.mlp.depth)?;
    f.set("hidden_width", &mut c.mlp.hidden_width)?;
    if let Some(a) = f.take_with("activation", |s| Activation::parse(s).ok())? {
        c.mlp.activation = a;
    }
    if let Some(sigma) = f.take_with("gaussian_sigma", |s| s.parse::<f64>().ok())? {
        match c.mlp.activation {
            Activation::Gaussian { .. } => c.mlp.activation = Activation::Gaussian { sigma },
            _ => return Err(f.error("gaussian_sigma", "only valid with activation=gaussian")),
        }
    }
    if let Some(e) = f.take_with("time_encoding", |s| TimeEncoding::parse(s).ok())? {
        c.time_encoding = e;
    }
    if let Some(n) = f.take_with("time_frequencies", |s| s.parse::<usize>().ok())? {
        match c.time_encoding {
            TimeEncoding::Sinusoidal { .. } => c.time_encoding = TimeEncoding::Sinusoidal { frequencies: n },
            _ => return Err(f.error("time_frequencies", "only valid with time_encoding=sinusoidal")),
        }
    }
    if let Some(m) = f.take_with("matmul_precision", |s| MatmulPrecision::parse(s).ok())? {
        c.matmul_precision = m;
    }
    f.finish()?;
    c.validate().map_err(|e| Error::format(path, "config", e.to_string()))?;
    Ok(c)
}

/// The config as a file that parses back to the same value.
pub fn train_config_text(config: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, v) in describe_config(config) {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

const MOVER_FIELDS: [&str; 7] = [
    "class_id",
    "dims",
    "position",
    "yaw",
    "linear_velocity",
    "angular_velocity",
    "points_per_frame",
];

fn default_mover() -> MoverSpec {
    MoverSpec {
        class_id: 1,
        dims: Vec3::new(1.0, 1.0, 1.0),
        initial_pose: RigidPose::from_translation(Vec3::new(0.0, 0.0, 1.0)),
        linear_velocity: Vec3::zeros(),
        angular_velocity: Vec3::zeros(),
        points_per_frame: 100,
    }
}

/// Applies a scene file on top of `base`. If any `mover.<i>.<field>` key is
/// present the movers are replaced: indices must run from 0 without gaps, and
/// unspecified mover fields take neutral defaults. The initial orientation
/// is a yaw angle in radians.
pub fn parse_scene_spec(text: &str, path: &Path, base: &SceneSpec) -> Result<SceneSpec> {
    let kv = KeyValues::parse(text, path)?;
    let mut mover_count = 0;
    let mut has_movers = false;
    for key in kv.keys() {
        if let Some(rest) = key.strip_prefix("mover.") {
            has_movers = true;
            let (index, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::format(path, key, "expected mover.<index>.<field>"))?;
            let index: usize = index
                .parse()
                .map_err(|_| Error::format(path, key, "mover index is not an integer"))?;
            if index > 1024 {
                return Err(Error::format(path, key, "mover index too large"));
            }
            if !MOVER_FIELDS.contains(&field) {
                return Err(Error::format(path, key, "unknown mover field"));
            }
            mover_count = mover_count.max(index + 1);
        }
    }
    let mut f = Fields::new(kv, path);
    let mut s = base.clone();
    if let Some(name) = f.take_with("name", |v| (!v.is_empty()).then(|| v.to_string()))? {
        s.name = name;
    }
    f.set("num_frames", &mut s.num_frames)?;
    f.set_f64("frame_interval", &mut s.frame_interval)?;
    f.set("background.num_points", &mut s.background.num_points)?;
    f.set_f64("background.extent", &mut s.background.extent)?;
    f.set_f64("background.z_min", &mut s.background.z_min)?;
    f.set_f64("background.z_max", &mut s.background.z_max)?;
    f.set_vec3("ego_velocity", &mut s.ego_velocity)?;
    f.set("resample_each_frame", &mut s.resample_each_frame)?;
    f.set_f64("noise_sigma", &mut s.noise_sigma)?;
    f.set("seed", &mut s.seed)?;
    if has_movers {
        s.movers.clear();
        for i in 0..mover_count {
            let key = |field: &str| format!("mover.{i}.{field}");
            if !MOVER_FIELDS.iter().any(|field| f.entries.contains_key(&key(field))) {
                return Err(Error::format(path, format!("mover.{i}"), "mover indices must be contiguous"));
            }
            let mut m = default_mover();
            f.set(&key("class_id"), &mut m.class_id)?;
            f.set_vec3(&key("dims"), &mut m.dims)?;
            let mut position = *m.initial_pose.translation();
            let mut yaw = 0.0;
            f.set_vec3(&key("position"), &mut position)?;
            f.set_f64(&key("yaw"), &mut yaw)?;
            m.initial_pose = RigidPose::from_yaw(yaw, position);
            f.set_vec3(&key("linear_velocity"), &mut m.linear_velocity)?;
            f.set_vec3(&key("angular_velocity"), &mut m.angular_velocity)?;
            f.set(&key("points_per_frame"), &mut m.points_per_frame)?;
            s.movers.push(m);
        }
    }
    f.finish()?;
    s.validate().map_err(|e| Error::format(path, "scene", e.to_string()))?;
    Ok(s)
}

/// The spec as a scene file. Mover orientations are written as yaw, so only
/// rotations about `z` survive a round trip.
pub fn scene_spec_text(spec: &SceneSpec) -> String {
    let mut out = String::new();
    let b = &spec.background;
    let _ = writeln!(out, "name={}", spec.name);
    let _ = writeln!(out, "num_frames={}", spec.num_frames);
    let _ = writeln!(out, "frame_interval={:?}", spec.frame_interval);
    let _ = writeln!(out, "background.num_points={}", b.num_points);
    let _ = writeln!(out, "background.extent={:?}", b.extent);
    let _ = writeln!(out, "background.z_min={:?}", b.z_min);
    let _ = writeln!(out, "background.z_max={:?}", b.z_max);
    let _ = writeln!(out, "ego_velocity={}", vec3_text(&spec.ego_velocity));
    let _ = writeln!(out, "resample_each_frame={}", spec.resample_each_frame);
    let _ = writeln!(out, "noise_sigma={:?}", spec.noise_sigma);
    let _ = writeln!(out, "seed={}", spec.seed);
    for (i, m) in spec.movers.iter().enumerate() {
        let r = m.initial_pose.rotation();
        let _ = writeln!(out, "mover.{i}.class_id={}", m.class_id);
        let _ = writeln!(out, "mover.{i}.dims={}", vec3_text(&m.dims));
        let _ = writeln!(out, "mover.{i}.position={}", vec3_text(m.initial_pose.translation()));
        let _ = writeln!(out, "mover.{i}.yaw={:?}", r[(1, 0)].atan2(r[(0, 0)]));
        let _ = writeln!(out, "mover.{i}.linear_velocity={}", vec3_text(&m.linear_velocity));
        let _ = writeln!(out, "mover.{i}.angular_velocity={}", vec3_text(&m.angular_velocity));
        let _ = writeln!(out, "mover.{i}.points_per_frame={}", m.points_per_frame);
    }
    out
}
