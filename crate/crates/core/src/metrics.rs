//! Endpoint-error metrics: Average EPE, Threeway EPE and speed-bucketed
//! normalized EPE per class.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{PointCloudSequence, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpeSample {
    pub epe: f64,
    /// Ground-truth displacement magnitude per frame interval.
    pub gt_speed: f64,
    pub class_id: i32,
    pub is_foreground: bool,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketSpec {
    /// Speeds below this are static (0.05 m per interval is 0.5 m/s at 10 Hz).
    pub static_threshold: f64,
    pub speed_bucket_width: f64,
    /// The last bucket is open-ended.
    pub max_buckets: usize,
}

impl Default for BucketSpec {
    fn default() -> Self {
        Self {
            static_threshold: 0.05,
            speed_bucket_width: 0.04,
            max_buckets: 50,
        }
    }
}

impl BucketSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.static_threshold > 0.0 && self.speed_bucket_width > 0.0 && self.max_buckets >= 1) {
            return Err(Error::InvalidArgument(
                "bucket thresholds and count must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn is_dynamic(&self, speed: f64) -> bool {
        speed >= self.static_threshold
    }

    /// Bucket of a dynamic speed.
    pub fn bucket(&self, speed: f64) -> usize {
        let b = ((speed - self.static_threshold) / self.speed_bucket_width).floor();
        (b.max(0.0) as usize).min(self.max_buckets - 1)
    }
}

pub fn epe(pred: &Vec3, gt: &Vec3) -> f64 {
    (pred - gt).norm()
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn valid(samples: &[EpeSample]) -> impl Iterator<Item = &EpeSample> {
    samples.iter().filter(|s| s.valid)
}

pub fn average_epe(samples: &[EpeSample]) -> Result<f64> {
    mean(valid(samples).map(|s| s.epe))
        .ok_or_else(|| Error::InvalidArgument("no valid samples to average".into()))
}

/// Per-bucket Average EPE; `None` marks an empty bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreewayEpe {
    pub fg_dynamic: Option<f64>,
    pub fg_static: Option<f64>,
    pub bg_static: Option<f64>,
    /// Mean over the non-empty buckets.
    pub mean: f64,
}

pub fn threeway_epe(samples: &[EpeSample], spec: &BucketSpec) -> Result<ThreewayEpe> {
    spec.validate()?;
    average_epe(samples)?;
    let bucket = |fg: bool, dynamic: bool| {
        mean(
            valid(samples)
                .filter(|s| s.is_foreground == fg && spec.is_dynamic(s.gt_speed) == dynamic)
                .map(|s| s.epe),
        )
    };
    let fg_dynamic = bucket(true, true);
    let fg_static = bucket(true, false);
    let bg_static = bucket(false, false);
    let mean = mean([fg_dynamic, fg_static, bg_static].into_iter().flatten())
        .ok_or_else(|| Error::InvalidArgument("only background-dynamic samples".into()))?;
    Ok(ThreewayEpe {
        fg_dynamic,
        fg_static,
        bg_static,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub static_epe: Option<f64>,
    /// Mean over non-empty speed buckets of `mean EPE / mean gt speed`.
    pub dynamic_normalized_epe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketNormalized {
    pub per_class: BTreeMap<i32, ClassMetrics>,
    /// Unweighted mean over classes that have dynamic points.
    pub mean_dynamic_normalized_epe: Option<f64>,
}

pub fn bucket_normalized_epe(samples: &[EpeSample], spec: &BucketSpec) -> Result<BucketNormalized> {
    spec.validate()?;
    average_epe(samples)?;
    #[derive(Default)]
    struct Acc {
        static_epe: Vec<f64>,
        buckets: BTreeMap<usize, (f64, f64, usize)>,
    }
    let mut classes: BTreeMap<i32, Acc> = BTreeMap::new();
    for s in valid(samples) {
        let acc = classes.entry(s.class_id).or_default();
        if spec.is_dynamic(s.gt_speed) {
            let b = acc.buckets.entry(spec.bucket(s.gt_speed)).or_insert((0.0, 0.0, 0));
            b.0 += s.epe;
            b.1 += s.gt_speed;
            b.2 += 1;
        } else {
            acc.static_epe.push(s.epe);
        }
    }
    let per_class: BTreeMap<i32, ClassMetrics> = classes
        .into_iter()
        .map(|(c, acc)| {
            let normalized = mean(acc.buckets.values().map(|&(e, v, n)| {
                let n = n as f64;
                (e / n) / (v / n)
            }));
            (
                c,
                ClassMetrics {
                    static_epe: mean(acc.static_epe),
                    dynamic_normalized_epe: normalized,
                },
            )
        })
        .collect();
    let mean_dynamic_normalized_epe = mean(per_class.values().filter_map(|m| m.dynamic_normalized_epe));
    Ok(BucketNormalized {
        per_class,
        mean_dynamic_normalized_epe,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub average_epe: f64,
    pub threeway: ThreewayEpe,
    pub per_class: BTreeMap<i32, ClassMetrics>,
    pub mean_dynamic_normalized_epe: Option<f64>,
}

pub fn evaluate(samples: &[EpeSample], spec: &BucketSpec) -> Result<MetricReport> {
    let average_epe = average_epe(samples)?;
    let threeway = threeway_epe(samples, spec)?;
    let bucketed = bucket_normalized_epe(samples, spec)?;
    Ok(MetricReport {
        average_epe,
        threeway,
        per_class: bucketed.per_class,
        mean_dynamic_normalized_epe: bucketed.mean_dynamic_normalized_epe,
    })
}

/// Pairs predicted flow with ground truth for every annotated frame pair.
pub fn collect_samples(sequence: &PointCloudSequence, flow: &FlowField) -> Result<Vec<EpeSample>> {
    if flow.len() != sequence.last_index() {
        return Err(Error::ShapeMismatch(format!(
            "{} flow frames for a {}-frame sequence",
            flow.len(),
            sequence.len()
        )));
    }
    let mut out = Vec::new();
    for (t, pred) in flow.frames.iter().enumerate() {
        let frame = sequence.frame(t);
        let gt = frame
            .gt
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("frame {t} has no ground truth")))?;
        if pred.len() != frame.cloud.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame {t}: {} flow vectors for {} points",
                pred.len(),
                frame.cloud.len()
            )));
        }
        for i in 0..pred.len() {
            out.push(EpeSample {
                epe: epe(&pred[i], &gt.flow[i]),
                gt_speed: gt.flow[i].norm(),
                class_id: gt.class_id[i],
                is_foreground: gt.is_foreground[i],
                valid: gt.valid[i],
            });
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v}"))
}

impl MetricReport {
    /// `name=value` lines; empty buckets are written as `nan`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "average_epe={}", self.average_epe);
        let _ = writeln!(s, "threeway.fg_dynamic={}", opt(self.threeway.fg_dynamic));
        let _ = writeln!(s, "threeway.fg_static={}", opt(self.threeway.fg_static));
        let _ = writeln!(s, "threeway.bg_static={}", opt(self.threeway.bg_static));
        let _ = writeln!(s, "threeway.mean={}", self.threeway.mean);
        for (c, m) in &self.per_class {
            let _ = writeln!(s, "class.{c}.static_epe={}", opt(m.static_epe));
            let _ = writeln!(s, "class.{c}.dynamic_normalized_epe={}", opt(m.dynamic_normalized_epe));
        }
        let _ = writeln!(s, "mean_dynamic_normalized_epe={}", opt(self.mean_dynamic_normalized_epe));
        s
    }

    pub fn to_text(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "Average EPE            {:.4} m", self.average_epe);
        let _ = writeln!(s, "Threeway EPE           {:.4} m", self.threeway.mean);
        let _ = writeln!(s, "  foreground dynamic   {}", f(self.threeway.fg_dynamic));
        let _ = writeln!(s, "  foreground static    {}", f(self.threeway.fg_static));
        let _ = writeln!(s, "  background static    {}", f(self.threeway.bg_static));
        let _ = writeln!(s, "Per class              static EPE   dynamic normalized EPE");
        for (c, m) in &self.per_class {
            let _ = writeln!(s, "  {c:<20} {:<12} {}", f(m.static_epe), f(m.dynamic_normalized_epe));
        }
        let _ = writeln!(
            s,
            "Mean dynamic normalized EPE {}",
            f(self.mean_dynamic_normalized_epe)
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(epe: f64, speed: f64, class_id: i32, fg: bool) -> EpeSample {
        EpeSample {
            epe,
            gt_speed: speed,
            class_id,
            is_foreground: fg,
            valid: true,
        }
    }

    #[test]
    fn endpoint_error() {
        let z = Vec3::zeros();
        assert_eq!(epe(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 2.0, 3.0)), 0.0);
        assert_eq!(epe(&z, &Vec3::new(1.0, 0.0, 0.0)), 1.0);
        assert_eq!(epe(&Vec3::new(3.0, 4.0, 0.0), &z), 5.0);
    }

    #[test]
    fn average_with_validity_mask() {
        assert_eq!(average_epe(&[sample(0.0, 0.0, 0, false); 4]).unwrap(), 0.0);
        assert_eq!(average_epe(&[sample(1.0, 0.0, 0, false), sample(3.0, 0.0, 0, false)]).unwrap(), 2.0);
        let mut s = vec![sample(1.0, 0.0, 0, false)];
        s.extend((0..100).map(|_| EpeSample { valid: false, ..sample(50.0, 1.0, 1, true) }));
        assert_eq!(average_epe(&s).unwrap(), 1.0);
        let invalid = [EpeSample { valid: false, ..sample(1.0, 0.0, 0, false) }];
        assert!(average_epe(&invalid).is_err());
        assert!(average_epe(&[]).is_err());
    }

    #[test]
    fn threeway_one_per_bucket() {
        let spec = BucketSpec::default();
        let s = [sample(0.3, 0.2, 1, true), sample(0.1, 0.0, 1, true), sample(0.02, 0.0, 0, false)];
        let t = threeway_epe(&s, &spec).unwrap();
        assert_eq!(t.fg_dynamic, Some(0.3));
        assert_eq!(t.fg_static, Some(0.1));
        assert_eq!(t.bg_static, Some(0.02));
        assert!((t.mean - 0.14).abs() <= 1e-12);
    }

    #[test]
    fn threeway_single_bucket_and_background_dynamic_dropped() {
        let spec = BucketSpec::default();
        let s = [sample(0.01, 0.0, 0, false), sample(0.01, 0.01, 0, false), sample(9.0, 1.0, 0, false)];
        let t = threeway_epe(&s, &spec).unwrap();
        assert_eq!((t.fg_dynamic, t.fg_static), (None, None));
        assert_eq!(t.bg_static, Some(0.01));
        assert_eq!(t.mean, 0.01);
    }

    #[test]
    fn normalized_single_bucket_ratio() {
        let s = vec![sample(0.05, 0.10, 3, true); 10];
        let b = bucket_normalized_epe(&s, &BucketSpec::default()).unwrap();
        let c = b.per_class[&3];
        assert!((c.dynamic_normalized_epe.unwrap() - 0.5).abs() <= 1e-12);
        assert_eq!(c.static_epe, None);
    }

    #[test]
    fn normalized_two_classes() {
        let mut s = vec![sample(0.1, 1.0, 1, true); 4];
        s.extend(vec![sample(0.054, 0.06, 2, true); 3]);
        let b = bucket_normalized_epe(&s, &BucketSpec::default()).unwrap();
        assert!((b.per_class[&1].dynamic_normalized_epe.unwrap() - 0.1).abs() <= 1e-12);
        assert!((b.per_class[&2].dynamic_normalized_epe.unwrap() - 0.9).abs() <= 1e-12);
        assert!((b.mean_dynamic_normalized_epe.unwrap() - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn buckets_partition_speeds() {
        let spec = BucketSpec::default();
        assert_eq!(spec.bucket(0.05), 0);
        assert_eq!(spec.bucket(0.0899), 0);
        assert_eq!(spec.bucket(0.0901), 1);
        assert_eq!(spec.bucket(1e6), 49);
        assert!(!spec.is_dynamic(0.0499));
    }
}
