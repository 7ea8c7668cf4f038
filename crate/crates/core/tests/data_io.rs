use fusenav::data::*;
use fusenav::sim::{synth_scenario, Scenario, SimConfig};
use fusenav::Error;
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn le_record(vals: [f32; 4]) -> Vec<u8> {
    vals.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[test]
fn velodyne_examples() {
    // 1.0 = 0x3f800000, 2.0 = 0x40000000, 3.0 = 0x40400000, 0.5 = 0x3f000000
    let bytes = [
        0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x40, 0x40, 0x00, 0x00, 0x00, 0x3f,
    ];
    let (cloud, dropped) = parse_velodyne_bin(&bytes).unwrap();
    assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0, 0.5]]);
    assert_eq!(dropped, 0);

    let (empty, _) = parse_velodyne_bin(&[]).unwrap();
    assert!(empty.is_empty());

    let err = parse_velodyne_bin(&[0u8; 15]).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("offset 0"), "{err}");
    let err = parse_velodyne_bin(&[0u8; 33]).unwrap_err();
    assert!(err.to_string().contains("offset 32"), "{err}");
}

#[test]
fn velodyne_drops_non_finite_and_clamps_reflectance() {
    let mut bytes = le_record([1.0, f32::NAN, 0.0, 0.2]);
    bytes.extend(le_record([0.0, 0.0, 0.0, 1.5]));
    bytes.extend(le_record([f32::INFINITY, 0.0, 0.0, 0.2]));
    let (cloud, dropped) = parse_velodyne_bin(&bytes).unwrap();
    assert_eq!(dropped, 2);
    assert_eq!(cloud.points, vec![[0.0, 0.0, 0.0, 1.0]]);
}

const IDENT: &str = "1 0 0 0 0 1 0 0 0 0 1 0";

#[test]
fn calib_examples() {
    let text = format!("P2: 7 0 3 0.5 0 7 2 0 0 0 1 0.25\nTr: {IDENT}\n");
    let c = parse_calib(&text).unwrap();
    assert_eq!(c.p, Matrix3x4::from_row_slice(&[7., 0., 3., 0.5, 0., 7., 2., 0., 0., 0., 1., 0.25]));
    assert_eq!(c.tr, Matrix4::identity());

    let err = parse_calib(&format!("P2: {IDENT}\nTr: 1 0 0 0 0 1 0 0 0 0 1\n")).unwrap_err();
    assert!(matches!(&err, Error::Format { what, .. } if what == "Tr"), "{err}");

    let fixture = format!("P0: {IDENT}\nP1: {IDENT}\nP2: 100 0 50 0 0 100 50 0 0 0 1 0\nP3: {IDENT}\nTr: {IDENT}\n");
    assert!(parse_calib(&fixture).is_ok());

    let err = parse_calib(&format!("Tr: {IDENT}\n")).unwrap_err();
    assert!(matches!(&err, Error::Format { what, .. } if what == "P2"), "{err}");
}

#[test]
fn calib_rejects_non_rigid_tr() {
    let err = parse_calib(&format!("P2: {IDENT}\nTr: 2 0 0 0 0 1 0 0 0 0 1 0\n")).unwrap_err();
    assert!(err.to_string().contains("Tr") || err.to_string().contains("rigid"), "{err}");
}

#[test]
fn poses_examples() {
    let poses = parse_poses(IDENT).unwrap();
    assert_eq!(poses, vec![Pose::identity()]);

    let many = vec![IDENT; 100].join("\n");
    assert_eq!(parse_poses(&many).unwrap().len(), 100);

    let text = format!("{IDENT}\n{IDENT}\n{IDENT} 1\n");
    let err = parse_poses(&text).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn ppm_examples() {
    let mut bytes = b"P6\n2 1\n255\n".to_vec();
    bytes.extend([255, 0, 0, 0, 255, 0]);
    let img = load_image(&bytes, ImageFormat::Ppm).unwrap();
    assert_eq!((img.width, img.height), (2, 1));
    assert_eq!(img.pixel(0, 0), [255, 0, 0]);
    assert_eq!(img.pixel(1, 0), [0, 255, 0]);

    let mut bad = b"P6\n2 1\n65535\n".to_vec();
    bad.extend([0; 12]);
    assert!(matches!(decode_ppm(&bad), Err(Error::Format { .. })));

    let mut short = b"P6\n2 1\n255\n".to_vec();
    short.extend([255, 0, 0, 0]);
    let err = decode_ppm(&short).unwrap_err();
    assert!(err.to_string().contains("offset"), "{err}");

    assert!(decode_ppm(b"P5\n2 1\n255\n\0\0").is_err());
}

#[test]
fn ppm_header_comments_are_skipped() {
    let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
    bytes.extend([1, 2, 3]);
    assert_eq!(decode_ppm(&bytes).unwrap().pixel(0, 0), [1, 2, 3]);
}

proptest! {
    #[test]
    fn velodyne_round_trip_is_bit_exact(
        pts in prop::collection::vec((-1.0e4f32..1.0e4, -1.0e4f32..1.0e4, -1.0e4f32..1.0e4, 0.0f32..=1.0), 0..64)
    ) {
        let cloud = PointCloud::new(pts.iter().map(|&(x, y, z, r)| [x as f64, y as f64, z as f64, r as f64]).collect());
        let bytes = serialize_velodyne_bin(&cloud);
        let (back, dropped) = parse_velodyne_bin(&bytes).unwrap();
        prop_assert_eq!(dropped, 0);
        prop_assert_eq!(serialize_velodyne_bin(&back), bytes);
        prop_assert_eq!(back, cloud);
    }

    #[test]
    fn ppm_round_trip_is_bit_exact(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..3 * w * h).map(|_| rand::Rng::gen(&mut rng)).collect();
        let img = Image::new(w, h, pixels).unwrap();
        let bytes = encode_ppm(&img);
        let back = decode_ppm(&bytes).unwrap();
        prop_assert_eq!(encode_ppm(&back), bytes);
        prop_assert_eq!(back, img);
    }

    #[test]
    fn poses_round_trip_is_bit_exact(
        poses in prop::collection::vec((-3.2f64..3.2, -3.2f64..3.2, -3.2f64..3.2, -100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 1..10)
    ) {
        let poses: Vec<Pose> = poses
            .iter()
            .map(|&(a, b, c, x, y, z)| Pose::from_rotation_translation(*Rotation3::from_euler_angles(a, b, c).matrix(), Vector3::new(x, y, z)))
            .collect();
        let text = poses_to_text(&poses);
        let back = parse_poses(&text).unwrap();
        prop_assert_eq!(poses_to_text(&back), text);
        prop_assert_eq!(back, poses);
    }

    #[test]
    fn calib_round_trip_is_bit_exact(f in 10.0f64..1000.0, cx in 0.0f64..600.0, yaw in -3.2f64..3.2, tx in -2.0f64..2.0) {
        let p = Matrix3x4::new(f, 0.0, cx, 0.0, 0.0, f, cx / 2.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        let r = *Rotation3::from_euler_angles(0.0, yaw, 0.0).matrix();
        let tr = Pose::from_rotation_translation(r, Vector3::new(tx, -0.08, -0.27)).t;
        let c = CalibrationSet::new(p, tr).unwrap();
        let text = c.to_text();
        let back = parse_calib(&text).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back, c);
    }
}

fn straight_poses(n: usize, step: f64) -> Vec<Pose> {
    (0..n)
        .map(|t| Pose::from_rotation_translation(Matrix3::identity(), Vector3::new(0.0, 0.0, step * t as f64)))
        .collect()
}

#[test]
fn straight_sequence_labels() {
    let labels = derive_labels(&straight_poses(12, 1.0), &LabelConfig::default()).unwrap();
    // frames 0..=6 have a pose 5 m ahead; the rest are dropped
    assert_eq!(labels.iter().filter(|l| l.is_some()).count(), 7);
    for (wp, ego) in labels.iter().flatten() {
        assert!((ego[0]).abs() < 1e-12 && ego[1].abs() < 1e-12 && (ego[2] - 1.0).abs() < 1e-12, "{ego:?}");
        assert!((wp[0] - 5.0).abs() < 1e-12 && wp[1].abs() < 1e-12, "{wp:?}");
    }
    assert!(derive_labels(&straight_poses(1, 1.0), &LabelConfig::default()).unwrap().iter().all(Option::is_none));
}

fn write_tree(root: &std::path::Path, ids: &[u32], frames: usize) {
    let cfg = SimConfig {
        frames,
        ..Default::default()
    };
    for &id in ids {
        let raw = synth_scenario(Scenario::Standard, &cfg, id as u64).unwrap();
        write_sequence(root, id, &raw).unwrap();
    }
}

#[test]
fn split_selects_sequences() {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &[3, 8, 17], 12);
    let labels = LabelConfig::default();
    let val = assemble_sequences(dir.path(), &Split::VAL, &labels).unwrap();
    assert_eq!(val.iter().map(|s| s.id).collect::<Vec<_>>(), vec![8]);
    let train = assemble_sequences(dir.path(), &Split::TRAIN, &labels).unwrap();
    assert_eq!(train.iter().map(|s| s.id).collect::<Vec<_>>(), vec![3]);
    let test = assemble_sequences(dir.path(), &Split::TEST, &labels).unwrap();
    assert_eq!(test.iter().map(|s| s.id).collect::<Vec<_>>(), vec![17]);
    let frames = assemble_dataset(dir.path(), &Split::VAL, &labels).unwrap();
    assert_eq!(frames.len(), val[0].frames.len());
    assert!(!frames.is_empty());

    let err = assemble_sequences(dir.path(), &Split::Ids(vec![5]), &labels).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("05"), "{err}");
}

#[test]
fn splits_partition_the_sequence_numbers() {
    let train = Split::TRAIN.members().unwrap();
    let val = Split::VAL.members().unwrap();
    let test = Split::TEST.members().unwrap();
    let mut all: Vec<u32> = train.iter().chain(&val).chain(&test).copied().collect();
    all.sort();
    assert_eq!(all, (0..=20).collect::<Vec<_>>());
    assert_eq!(val, vec![8]);
}

#[test]
fn written_tree_round_trips_and_labels_reintegrate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        frames: 30,
        ..Default::default()
    };
    let raw = synth_scenario(Scenario::Dynamic, &cfg, 11).unwrap();
    write_sequence(dir.path(), 0, &raw).unwrap();
    let seq = load_sequence(dir.path(), 0, &LabelConfig::default()).unwrap();
    assert!(!seq.frames.is_empty());
    for lf in &seq.frames {
        let src = &raw[lf.frame.index];
        assert_eq!(lf.frame.image, src.image);
        assert_eq!(lf.frame.pose.t, src.pose.t);
        assert_eq!(lf.frame.calib.p, src.calib.p);
        assert_eq!(serialize_velodyne_bin(&lf.frame.cloud), serialize_velodyne_bin(&src.cloud));
    }
    // composing ego deltas from the first pose re-integrates the trajectory
    let mut p = seq.frames[0].frame.pose.translation();
    for lf in &seq.frames {
        p += lf.frame.pose.rotation() * Vector3::from(lf.ego_delta);
        assert!((p - raw[lf.frame.index + 1].pose.translation()).norm() <= 1e-9);
    }
    let times: Vec<f64> = seq.frames.iter().map(|lf| lf.frame.timestamp).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn missing_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let err = assemble_dataset(&missing, &Split::TRAIN, &LabelConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("nowhere"), "{err}");
}

fn labeled_frame() -> LabeledFrame {
    let cfg = SimConfig {
        frames: 12,
        ..Default::default()
    };
    let mut lf = fusenav::sim::label_frames(synth_scenario(Scenario::Standard, &cfg, 3).unwrap(), &LabelConfig::default())
        .unwrap()
        .remove(0);
    lf.waypoint = [4.0, 1.0];
    lf.ego_delta = [0.3, 0.0, 0.9];
    lf
}

#[test]
fn augmentation_examples() {
    let lf = labeled_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let flip = AugmentParams {
        flip: true,
        ..AugmentParams::NEUTRAL
    };
    let once = apply_augmentation(&lf, &flip, &mut rng);
    assert_eq!(once.waypoint, [4.0, -1.0]);
    assert_eq!(once.ego_delta, [-0.3, 0.0, 0.9]);
    assert_eq!(once.frame.image.pixel(0, 0), lf.frame.image.pixel(lf.frame.image.width - 1, 0));
    let twice = apply_augmentation(&once, &flip, &mut rng);
    assert_eq!(twice.waypoint, lf.waypoint);
    assert_eq!(twice.ego_delta, lf.ego_delta);
    assert_eq!(twice.frame.image, lf.frame.image);
    for (a, b) in twice.frame.cloud.points.iter().zip(&lf.frame.cloud.points) {
        for k in 0..4 {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
    }

    let neutral = apply_augmentation(&lf, &AugmentParams::NEUTRAL, &mut rng);
    assert_eq!(neutral, lf);
    let off = AugmentPolicy {
        enabled: false,
        ..Default::default()
    };
    assert_eq!(augment_frame(&lf, &mut rng, &off), lf);
}

#[test]
fn brightness_contrast_formula() {
    let lf = labeled_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = AugmentParams {
        alpha: 1.2,
        delta: -20.0,
        ..AugmentParams::NEUTRAL
    };
    let out = apply_augmentation(&lf, &p, &mut rng);
    for (a, b) in out.frame.image.pixels.iter().zip(&lf.frame.image.pixels) {
        let want = (1.2 * (*b as f64 - 128.0) + 108.0).round().clamp(0.0, 255.0) as u8;
        assert_eq!(*a, want);
    }
}

#[test]
fn yaw_rotates_points_and_labels_together() {
    let lf = labeled_frame();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let theta = 5f64.to_radians();
    let p = AugmentParams {
        yaw_rad: theta,
        ..AugmentParams::NEUTRAL
    };
    let out = apply_augmentation(&lf, &p, &mut rng);
    // rotation about camera y: x' = x cos + z sin, z' = -x sin + z cos
    let (s, c) = theta.sin_cos();
    let (fwd, lat) = (lf.waypoint[0], lf.waypoint[1]);
    assert!((out.waypoint[1] - (lat * c + fwd * s)).abs() < 1e-12);
    assert!((out.waypoint[0] - (-lat * s + fwd * c)).abs() < 1e-12);
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    assert!((norm(out.ego_delta) - norm(lf.ego_delta)).abs() < 1e-12);
    let to_cam = |cl: &PointCloud, i: usize| {
        let q = lf.frame.calib.tr * nalgebra::Vector4::new(cl.points[i][0], cl.points[i][1], cl.points[i][2], 1.0);
        [q.x, q.y, q.z]
    };
    for i in 0..lf.frame.cloud.len() {
        let a = to_cam(&lf.frame.cloud, i);
        let b = to_cam(&out.frame.cloud, i);
        assert!((b[0] - (a[0] * c + a[2] * s)).abs() < 1e-9);
        assert!((b[1] - a[1]).abs() < 1e-9);
        assert!((b[2] - (-a[0] * s + a[2] * c)).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_keeps_labels_bounded(seed in any::<u64>()) {
        let lf = labeled_frame();
        let cfg = LabelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment_frame(&lf, &mut rng, &AugmentPolicy::default());
        prop_assert!(out.ego_delta.iter().all(|x| x.is_finite() && x.abs() <= cfg.max_step));
        prop_assert!(out.waypoint.iter().all(|x| x.is_finite() && x.abs() <= cfg.waypoint_range));
        prop_assert_eq!(out.frame.image.pixels.len(), lf.frame.image.pixels.len());
        prop_assert_eq!(out.frame.cloud.len(), lf.frame.cloud.len());
    }
}
