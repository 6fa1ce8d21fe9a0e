//! On-disk format round trips and corruption handling.

use std::path::Path;

use pdeflow::geometry::{PointCloudSequence, DEFAULT_GROUND_HEIGHT};
use pdeflow::io::{
    decode_checkpoint, decode_flow, decode_ground_truth, decode_points, encode_points, frame_files, load_sequence,
    parse_manifest, parse_trajectory, save_sequence, MANIFEST_FILE,
};
use pdeflow::synth::{generate, SceneSpec};
use pdeflow::Error;
use proptest::prelude::*;

fn small_scene() -> PointCloudSequence {
    let spec = SceneSpec {
        num_frames: 4,
        background: pdeflow::synth::BackgroundSpec {
            num_points: 100,
            ..SceneSpec::desk_av().background
        },
        ..SceneSpec::desk_av()
    };
    generate(&spec).unwrap().without_ground(DEFAULT_GROUND_HEIGHT).unwrap()
}

fn expect_format_error(err: Error, file: &Path) {
    match err {
        Error::Format { path, .. } => assert_eq!(path, file),
        other => panic!("expected a format error for {}, got {other}", file.display()),
    }
}

#[test]
fn coordinates_survive_at_f32_precision() {
    let seq = small_scene();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&seq, dir.path()).unwrap();
    let loaded = load_sequence(dir.path()).unwrap();
    assert_eq!(loaded.len(), seq.len());
    for (a, b) in seq.frames().iter().zip(loaded.frames()) {
        assert_eq!(a.timestamp, b.timestamp);
        assert_eq!(a.ego_pose, b.ego_pose);
        for (p, q) in a.cloud.points.iter().zip(&b.cloud.points) {
            for j in 0..3 {
                assert_eq!((p[j] as f32) as f64, q[j]);
            }
        }
        let (ga, gb) = (a.gt.as_ref().unwrap(), b.gt.as_ref().unwrap());
        assert_eq!(ga.class_id, gb.class_id);
        assert_eq!(ga.valid, gb.valid);
        assert_eq!(ga.is_foreground, gb.is_foreground);
    }
}

#[test]
fn frames_without_ground_truth_omit_the_gt_column() {
    let seq = small_scene();
    let frames = seq
        .frames()
        .iter()
        .cloned()
        .map(|mut f| {
            f.gt = None;
            f
        })
        .collect();
    let bare = PointCloudSequence::new("bare", frames).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&bare, dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    for line in manifest.lines().skip(1) {
        assert_eq!(line.split_whitespace().count(), 15, "{line}");
    }
    assert_eq!(frame_files(dir.path()).unwrap().len(), bare.len());
    assert!(!load_sequence(dir.path()).unwrap().has_ground_truth());
}

#[test]
fn corrupted_magic_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    save_sequence(&small_scene(), dir.path()).unwrap();
    let victim = dir.path().join("frame_000002.pcsf");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] = b'X';
    std::fs::write(&victim, bytes).unwrap();
    let err = load_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("frame_000002.pcsf"), "{err}");
    expect_format_error(err, &victim);
}

#[test]
fn ground_truth_count_must_match_points() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_scene();
    save_sequence(&seq, dir.path()).unwrap();
    let victim = dir.path().join("frame_000001.pcsf");
    let mut shorter = seq.frame(1).cloud.clone();
    shorter.points.pop();
    std::fs::write(&victim, encode_points(&shorter)).unwrap();
    let err = load_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("frame_000001"), "{err}");
}

#[test]
fn manifest_rejects_non_monotone_time_and_gaps() {
    let p = Path::new("manifest.txt");
    let pose = "1 0 0 0 1 0 0 0 1 0 0 0";
    let good = format!("PCSEQ 1\n0 0.0 {pose} a.pcsf\n1 0.1 {pose} b.pcsf\n");
    assert_eq!(parse_manifest(&good, p).unwrap().len(), 2);
    for bad in [
        format!("PCSEQ 1\n0 0.1 {pose} a.pcsf\n1 0.1 {pose} b.pcsf\n"),
        format!("PCSEQ 1\n0 0.0 {pose} a.pcsf\n2 0.1 {pose} b.pcsf\n"),
        format!("PCSEQ 2\n0 0.0 {pose} a.pcsf\n1 0.1 {pose} b.pcsf\n"),
        format!("PCSEQ 1\n0 0.0 {pose} a.pcsf\n1 0.1 {pose} ../b.pcsf\n"),
        format!("PCSEQ 1\n0 0.0 {pose} a.pcsf\n"),
        format!("PCSEQ 1\n0 0.0 2 0 0 0 1 0 0 0 1 0 0 0 a.pcsf\n1 0.1 {pose} b.pcsf\n"),
    ] {
        expect_format_error(parse_manifest(&bad, p).unwrap_err(), p);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn decoders_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let p = Path::new("fuzz");
        let _ = decode_points(&bytes, p);
        let _ = decode_ground_truth(&bytes, p);
        let _ = decode_flow(&bytes, p);
        let _ = decode_checkpoint(&bytes, p);
        let text = String::from_utf8_lossy(&bytes);
        let _ = parse_manifest(&text, p);
        let _ = parse_trajectory(&text, p);
    }

    #[test]
    fn magic_prefixed_garbage_is_rejected_or_consistent(
        magic in prop::sample::select(vec![*b"PCSF", *b"FLGT", *b"FLOW", *b"NPRM"]),
        tail in proptest::collection::vec(any::<u8>(), 0..128),
    ) {
        let mut bytes = magic.to_vec();
        bytes.extend(tail);
        let p = Path::new("fuzz");
        if let Ok(cloud) = decode_points(&bytes, p) {
            prop_assert_eq!(encode_points(&cloud).len(), bytes.len());
        }
        if let Ok(flow) = decode_flow(&bytes, p) {
            prop_assert_eq!(8 + 12 * flow.len(), bytes.len());
        }
    }
}
