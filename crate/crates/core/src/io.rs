//! On-disk formats: sequence directories, flow and trajectory exports, and
//! network checkpoints. All binary data is little-endian.
//!
//! A sequence directory holds `manifest.txt` plus one `PCSF` points file and
//! an optional `FLGT` ground-truth file per frame. Decoders take raw bytes and
//! the path used in error messages, so they can be exercised without files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::flow::{FlowField, Trajectory};
use crate::geometry::{Frame, GroundTruth, Point3, PointCloud, PointCloudSequence, RigidPose, Vec3};
use crate::nn::{Activation, Layer, MlpConfig, MlpParams};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "PCSEQ 1";
pub const POINTS_MAGIC: &[u8; 4] = b"PCSF";
pub const GROUND_TRUTH_MAGIC: &[u8; 4] = b"FLGT";
pub const FLOW_MAGIC: &[u8; 4] = b"FLOW";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPRM";
pub const CHECKPOINT_VERSION: u32 = 1;

const GT_RECORD_BYTES: usize = 3 * 4 + 4 + 1 + 1;

/// Sequential little-endian reader that reports failures against a path.
struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, offset: 0, path }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                field,
                format!("truncated: need {n} byte(s) at offset {}", self.offset),
            )
        })?;
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                self.path,
                "magic",
                format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn i32(&mut self, field: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> Result<f64> {
        let v = f32::from_le_bytes(self.take(4, field)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(self.path, field, "non-finite value"));
        }
        Ok(v as f64)
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let v = f64::from_le_bytes(self.take(8, field)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(self.path, field, "non-finite value"));
        }
        Ok(v)
    }

    /// Checks that exactly `records × record_bytes` bytes remain.
    fn expect_remaining(&self, records: usize, record_bytes: usize, field: &str) -> Result<()> {
        let remaining = self.bytes.len() - self.offset;
        match records.checked_mul(record_bytes) {
            Some(n) if n == remaining => Ok(()),
            _ => Err(Error::format(
                self.path,
                field,
                format!("{records} record(s) of {record_bytes} bytes do not match {remaining} remaining byte(s)"),
            )),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::format(
                self.path,
                "trailing",
                format!("{} unexpected trailing byte(s)", self.bytes.len() - self.offset),
            ));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn check_count(len: usize, path: &Path) -> Result<u32> {
    u32::try_from(len).map_err(|_| Error::format(path, "count", format!("{len} records exceed the u32 count field")))
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * cloud.len());
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            push_f32(&mut out, v);
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut r = Reader::new(bytes, path);
    r.magic(POINTS_MAGIC)?;
    let count = r.u32("count")? as usize;
    r.expect_remaining(count, 12, "count")?;
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let field = format!("point[{i}]");
        points.push(Point3::new(r.f32(&field)?, r.f32(&field)?, r.f32(&field)?));
    }
    r.finish()?;
    Ok(PointCloud::new(points))
}

pub fn encode_ground_truth(gt: &GroundTruth) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + GT_RECORD_BYTES * gt.len());
    out.extend_from_slice(GROUND_TRUTH_MAGIC);
    out.extend_from_slice(&(gt.len() as u32).to_le_bytes());
    for i in 0..gt.len() {
        for v in gt.flow[i].iter() {
            push_f32(&mut out, *v);
        }
        out.extend_from_slice(&gt.class_id[i].to_le_bytes());
        out.push(gt.valid[i] as u8);
        out.push(gt.is_foreground[i] as u8);
    }
    out
}

fn flag(r: &mut Reader, field: &str) -> Result<bool> {
    match r.u8(field)? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(Error::format(r.path, field, format!("flag byte must be 0 or 1, found {other}"))),
    }
}

pub fn decode_ground_truth(bytes: &[u8], path: &Path) -> Result<GroundTruth> {
    let mut r = Reader::new(bytes, path);
    r.magic(GROUND_TRUTH_MAGIC)?;
    let count = r.u32("count")? as usize;
    r.expect_remaining(count, GT_RECORD_BYTES, "count")?;
    let mut gt = GroundTruth {
        flow: Vec::with_capacity(count),
        class_id: Vec::with_capacity(count),
        valid: Vec::with_capacity(count),
        is_foreground: Vec::with_capacity(count),
    };
    for i in 0..count {
        let field = format!("flow[{i}]");
        gt.flow.push(Vec3::new(r.f32(&field)?, r.f32(&field)?, r.f32(&field)?));
        gt.class_id.push(r.i32(&format!("class_id[{i}]"))?);
        gt.valid.push(flag(&mut r, &format!("valid[{i}]"))?);
        gt.is_foreground.push(flag(&mut r, &format!("is_foreground[{i}]"))?);
    }
    r.finish()?;
    Ok(gt)
}

/// One parsed manifest line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub timestamp: f64,
    pub pose: RigidPose,
    pub points_file: String,
    pub gt_file: Option<String>,
}

fn points_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.pcsf")
}

fn gt_file_name(frame: usize) -> String {
    format!("frame_{frame:06}.flgt")
}

/// Renders the manifest. Floats use the shortest representation that
/// parses back to the same `f64`.
pub fn encode_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (i, e) in entries.iter().enumerate() {
        let _ = write!(out, "{i} {:?}", e.timestamp);
        for v in e.pose.to_row_major() {
            let _ = write!(out, " {v:?}");
        }
        let _ = write!(out, " {}", e.points_file);
        if let Some(gt) = &e.gt_file {
            let _ = write!(out, " {gt}");
        }
        out.push('\n');
    }
    out
}

fn plain_file_name(name: &str, path: &Path, field: &str) -> Result<String> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\'])
        && Path::new(name).file_name().is_some();
    if !ok {
        return Err(Error::format(path, field, format!("`{name}` is not a plain file name")));
    }
    Ok(name.to_string())
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::format(
                path,
                "header",
                format!("expected `{MANIFEST_HEADER}`, found {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for (line_no, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let here = |f: &str| format!("line {line_no}: {f}");
        if !(15..=16).contains(&tokens.len()) {
            return Err(Error::format(
                path,
                here("fields"),
                format!("expected 15 or 16 fields, found {}", tokens.len()),
            ));
        }
        let index: usize = tokens[0]
            .parse()
            .map_err(|_| Error::format(path, here("frame_index"), format!("`{}` is not an index", tokens[0])))?;
        if index != entries.len() {
            return Err(Error::format(
                path,
                here("frame_index"),
                format!("expected {}, found {index}", entries.len()),
            ));
        }
        let number = |token: &str, field: &str| -> Result<f64> {
            token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, here(field), format!("`{token}` is not a finite number")))
        };
        let timestamp = number(tokens[1], "timestamp")?;
        if let Some(prev) = entries.last() {
            if timestamp <= prev.timestamp {
                return Err(Error::format(
                    path,
                    here("timestamp"),
                    format!("{timestamp} does not increase past {}", prev.timestamp),
                ));
            }
        }
        let mut pose = [0.0; 12];
        for (j, slot) in pose.iter_mut().enumerate() {
            *slot = number(tokens[2 + j], &format!("pose[{j}]"))?;
        }
        let pose = RigidPose::from_row_major(&pose).map_err(|e| Error::format(path, here("pose"), e.to_string()))?;
        entries.push(ManifestEntry {
            timestamp,
            pose,
            points_file: plain_file_name(tokens[14], path, &here("points_file"))?,
            gt_file: tokens
                .get(15)
                .map(|t| plain_file_name(t, path, &here("gt_file")))
                .transpose()?,
        });
    }
    if entries.len() < 2 {
        return Err(Error::format(path, "frames", format!("need at least 2 frames, found {}", entries.len())));
    }
    Ok(entries)
}

/// Writes the manifest and per-frame files into `dir`, creating it if needed.
pub fn save_sequence(sequence: &PointCloudSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequence.len());
    for (i, frame) in sequence.frames().iter().enumerate() {
        let points_file = points_file_name(i);
        write_file(&dir.join(&points_file), &encode_points(&frame.cloud))?;
        let gt_file = match &frame.gt {
            Some(gt) => {
                let name = gt_file_name(i);
                write_file(&dir.join(&name), &encode_ground_truth(gt))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            timestamp: frame.timestamp,
            pose: frame.ego_pose,
            points_file,
            gt_file,
        });
    }
    check_count(sequence.len(), dir)?;
    write_file(&dir.join(MANIFEST_FILE), encode_manifest(&entries).as_bytes())
}

/// Loads a sequence directory. Every file is validated before the sequence
/// is assembled; the sequence name is the directory name.
pub fn load_sequence(dir: &Path) -> Result<PointCloudSequence> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = read_file(&manifest_path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(&manifest_path, "encoding", "not UTF-8"))?;
    let entries = parse_manifest(text, &manifest_path)?;
    let mut frames = Vec::with_capacity(entries.len());
    for entry in entries {
        let points_path = dir.join(&entry.points_file);
        let cloud = decode_points(&read_file(&points_path)?, &points_path)?;
        let gt = match &entry.gt_file {
            Some(name) => {
                let gt_path = dir.join(name);
                let gt = decode_ground_truth(&read_file(&gt_path)?, &gt_path)?;
                if gt.len() != cloud.len() {
                    return Err(Error::format(
                        &gt_path,
                        "count",
                        format!("{} ground-truth records for {} points", gt.len(), cloud.len()),
                    ));
                }
                Some(gt)
            }
            None => None,
        };
        frames.push(Frame {
            cloud,
            timestamp: entry.timestamp,
            ego_pose: entry.pose,
            gt,
        });
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    PointCloudSequence::new(name, frames)
}

pub fn encode_flow(flow: &[Vec3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 12 * flow.len());
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(flow.len() as u32).to_le_bytes());
    for v in flow {
        for c in v.iter() {
            push_f32(&mut out, *c);
        }
    }
    out
}

pub fn decode_flow(bytes: &[u8], path: &Path) -> Result<Vec<Vec3>> {
    let mut r = Reader::new(bytes, path);
    r.magic(FLOW_MAGIC)?;
    let count = r.u32("count")? as usize;
    r.expect_remaining(count, 12, "count")?;
    let mut flow = Vec::with_capacity(count);
    for i in 0..count {
        let field = format!("flow[{i}]");
        flow.push(Vec3::new(r.f32(&field)?, r.f32(&field)?, r.f32(&field)?));
    }
    r.finish()?;
    Ok(flow)
}

pub fn flow_file_name(frame: usize) -> String {
    format!("flow_{frame:06}.flow")
}

/// Writes one `FLOW` file per frame interval.
pub fn save_flow_field(flow: &FlowField, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in flow.frames.iter().enumerate() {
        check_count(frame.len(), dir)?;
        write_file(&dir.join(flow_file_name(i)), &encode_flow(frame))?;
    }
    Ok(())
}

/// Reads `flow_000000.flow`, `flow_000001.flow`, ... until the first gap.
/// Any other `.flow` file in the directory is an error.
pub fn load_flow_field(dir: &Path) -> Result<FlowField> {
    let listing = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".flow") {
            names.push(name);
        }
    }
    names.sort();
    let mut frames = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        if *name != flow_file_name(i) {
            return Err(Error::format(
                dir.join(name),
                "file name",
                format!("expected {} in a contiguous run", flow_file_name(i)),
            ));
        }
        let path = dir.join(name);
        frames.push(decode_flow(&read_file(&path)?, &path)?);
    }
    Ok(FlowField { frames })
}

/// One `timestamp x y z` line per sample.
pub fn encode_trajectory(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for (t, p) in &trajectory.samples {
        let _ = writeln!(out, "{t:?} {:?} {:?} {:?}", p.x, p.y, p.z);
    }
    out
}

pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let field = format!("line {}", i + 1);
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .filter(|v| v.len() == 4)
            .ok_or_else(|| Error::format(path, &field, "expected four finite numbers"))?;
        samples.push((values[0], Point3::new(values[1], values[2], values[3])));
    }
    Ok(Trajectory { samples })
}

pub fn save_trajectory(trajectory: &Trajectory, path: &Path) -> Result<()> {
    write_file(path, encode_trajectory(trajectory).as_bytes())
}

/// Checkpoint layout: magic, version, `input_dim`, `hidden_width`, `depth`,
/// `output_dim` (u32 each), activation tag (u8), seed (u64), gaussian sigma
/// (f64), then every layer's weight (row-major `fan_in × fan_out`) followed by
/// its bias, as f64.
pub fn encode_checkpoint(params: &MlpParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(41 + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [c.input_dim, c.hidden_width, c.depth, c.output_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(c.activation.tag());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&c.activation.sigma().to_le_bytes());
    for t in params.tensors() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MlpParams> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, "version", format!("unsupported version {version}")));
    }
    let input_dim = r.u32("input_dim")? as usize;
    let hidden_width = r.u32("hidden_width")? as usize;
    let depth = r.u32("depth")? as usize;
    let output_dim = r.u32("output_dim")? as usize;
    let tag = r.u8("activation")?;
    let seed = r.u64("seed")?;
    let sigma = r.f64("gaussian_sigma")?;
    let activation = match tag {
        0 => Activation::Relu,
        1 => Activation::Sinc,
        2 => Activation::Gaussian { sigma },
        other => return Err(Error::format(path, "activation", format!("unknown tag {other}"))),
    };
    if tag != 2 && sigma != Activation::Relu.sigma() {
        return Err(Error::format(path, "gaussian_sigma", "must hold the default for non-gaussian activations"));
    }
    let config = MlpConfig {
        input_dim,
        hidden_width,
        depth,
        output_dim,
        activation,
        seed,
    };
    config.validate().map_err(|e| Error::format(path, "config", e.to_string()))?;
    // Size check with overflow guards before any allocation.
    let count = (|| {
        let hidden = hidden_width.checked_mul(hidden_width)?.checked_add(hidden_width)?;
        let first = input_dim.checked_mul(hidden_width)?.checked_add(hidden_width)?;
        let last = hidden_width.checked_mul(output_dim)?.checked_add(output_dim)?;
        hidden.checked_mul(depth - 1)?.checked_add(first)?.checked_add(last)
    })();
    match count {
        Some(n) => r.expect_remaining(n, 8, "parameters")?,
        None => return Err(Error::format(path, "config", "parameter count overflows")),
    }
    let mut layers = Vec::with_capacity(depth + 1);
    for (i, (fan_in, fan_out)) in config.layer_shapes().into_iter().enumerate() {
        let mut read = |rows: usize, cols: usize, what: &str| -> Result<Array2<f64>> {
            let field = format!("layer[{i}].{what}");
            let data = (0..rows * cols).map(|_| r.f64(&field)).collect::<Result<Vec<f64>>>()?;
            Ok(Array2::from_shape_vec((rows, cols), data).expect("length matches shape"))
        };
        let weight = read(fan_in, fan_out, "weight")?;
        let bias = read(1, fan_out, "bias")?;
        layers.push(Layer { weight, bias });
    }
    r.finish()?;
    Ok(MlpParams { config, layers })
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    decode_checkpoint(&read_file(path)?, path)
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::format(path, "encoding", "not UTF-8"))
}

/// Paths of the per-frame files a manifest refers to, in frame order.
pub fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let entries = parse_manifest(&read_text(&manifest_path)?, &manifest_path)?;
    let mut out = Vec::new();
    for e in entries {
        out.push(dir.join(e.points_file));
        if let Some(gt) = e.gt_file {
            out.push(dir.join(gt));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn sample_gt() -> GroundTruth {
        GroundTruth {
            flow: vec![Vec3::new(0.5, -0.25, 0.0), Vec3::zeros()],
            class_id: vec![3, 0],
            valid: vec![true, false],
            is_foreground: vec![true, false],
        }
    }

    #[test]
    fn points_round_trip_at_f32() {
        let cloud = PointCloud::new(vec![Point3::new(0.1, -2.0, 3.5), Point3::new(1e3, 0.0, -0.0)]);
        let bytes = encode_points(&cloud);
        assert_eq!(&bytes[..4], b"PCSF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 8 + 24);
        let back = decode_points(&bytes, p()).unwrap();
        assert_eq!(back.points[0].x, 0.1f32 as f64);
        assert_eq!(encode_points(&back), bytes);
    }

    #[test]
    fn points_errors_name_the_field() {
        let mut bytes = encode_points(&PointCloud::new(vec![Point3::origin()]));
        bytes[0] = b'X';
        let err = decode_points(&bytes, Path::new("f.pcsf")).unwrap_err().to_string();
        assert!(err.contains("f.pcsf") && err.contains("magic"), "{err}");
        let good = encode_points(&PointCloud::new(vec![Point3::origin()]));
        assert!(decode_points(&good[..good.len() - 1], p()).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(decode_points(&long, p()).is_err());
        let mut nan = good.clone();
        nan[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_points(&nan, p()).unwrap_err().to_string().contains("point[0]"));
    }

    #[test]
    fn huge_count_is_rejected_without_allocating() {
        let mut bytes = b"PCSF".to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_points(&bytes, p()).is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let gt = sample_gt();
        let bytes = encode_ground_truth(&gt);
        assert_eq!(bytes.len(), 8 + 2 * 18);
        assert_eq!(decode_ground_truth(&bytes, p()).unwrap(), gt);
        let mut bad = bytes.clone();
        bad[8 + 16] = 2;
        assert!(decode_ground_truth(&bad, p()).unwrap_err().to_string().contains("valid[0]"));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let entries = vec![
            ManifestEntry {
                timestamp: 0.0,
                pose: RigidPose::from_yaw(0.3, Vec3::new(1.0, 2.0, 0.1)),
                points_file: "a.pcsf".into(),
                gt_file: Some("a.flgt".into()),
            },
            ManifestEntry {
                timestamp: 0.1,
                pose: RigidPose::identity(),
                points_file: "b.pcsf".into(),
                gt_file: None,
            },
        ];
        let text = encode_manifest(&entries);
        assert!(text.starts_with("PCSEQ 1\n0 0.0 "));
        assert!(text.lines().nth(2).unwrap().ends_with(" b.pcsf"));
        assert_eq!(parse_manifest(&text, p()).unwrap(), entries);

        let swapped = text.replace("\n1 0.1 ", "\n1 -0.1 ");
        assert!(parse_manifest(&swapped, p()).unwrap_err().to_string().contains("timestamp"));
        let skipped = text.replace("\n1 0.1 ", "\n2 0.1 ");
        assert!(parse_manifest(&skipped, p()).unwrap_err().to_string().contains("frame_index"));
        assert!(parse_manifest(&text.replace("PCSEQ 1", "PCSEQ 2"), p()).is_err());
        assert!(parse_manifest(&text.replace("b.pcsf", "../b.pcsf"), p()).is_err());
        let one = text.lines().take(2).collect::<Vec<_>>().join("\n");
        assert!(parse_manifest(&one, p()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for activation in [Activation::Relu, Activation::Sinc, Activation::Gaussian { sigma: 0.25 }] {
            let config = MlpConfig {
                depth: 3,
                hidden_width: 6,
                activation,
                seed: 77,
                ..MlpConfig::default()
            };
            let params = init_params(&config).unwrap();
            let bytes = encode_checkpoint(&params);
            assert_eq!(bytes.len(), 41 + 8 * params.param_count());
            let back = decode_checkpoint(&bytes, p()).unwrap();
            assert_eq!(back, params);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_headers() {
        let params = init_params(&MlpConfig {
            depth: 1,
            hidden_width: 2,
            ..MlpConfig::default()
        })
        .unwrap();
        let good = encode_checkpoint(&params);
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode_checkpoint(&bad_version, p()).unwrap_err().to_string().contains("version"));
        let mut bad_tag = good.clone();
        bad_tag[24] = 7;
        assert!(decode_checkpoint(&bad_tag, p()).unwrap_err().to_string().contains("activation"));
        let mut huge = good.clone();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge, p()).is_err());
        assert!(decode_checkpoint(&good[..good.len() - 8], p()).is_err());
    }

    #[test]
    fn flow_and_trajectory_round_trip() {
        let flow = vec![Vec3::new(0.25, 1.0, -3.0)];
        let bytes = encode_flow(&flow);
        assert_eq!(decode_flow(&bytes, p()).unwrap(), flow);
        let traj = Trajectory {
            samples: vec![(0.0, Point3::new(1.0, 2.0, 3.0)), (0.1, Point3::new(1.5, 2.0, 3.0))],
        };
        let text = encode_trajectory(&traj);
        assert_eq!(text, "0.0 1.0 2.0 3.0\n0.1 1.5 2.0 3.0\n");
        assert_eq!(parse_trajectory(&text, p()).unwrap(), traj);
        assert!(parse_trajectory("0 1 2\n", p()).is_err());
    }
}
