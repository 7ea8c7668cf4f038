use fusenav::data::{Image, LabelConfig, PointCloud, Pose};
use fusenav::geometry::{lidar_to_camera, project_to_pixels};
use fusenav::model::{reliability_cloud, reliability_image};
use fusenav::sim::*;
use fusenav::Error;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn straight(frames: usize, speed: f64) -> Vec<Pose> {
    (0..frames)
        .map(|t| Pose::from_rotation_translation(Matrix3::identity(), Vector3::new(0.0, 0.0, speed * t as f64)))
        .collect()
}

fn empty_world(frames: usize) -> World {
    World {
        ground_y: 1.65,
        checker: 1.0,
        boxes: vec![],
        trajectory: straight(frames, 1.0),
    }
}

fn camera_cloud(frame: &fusenav::data::Frame) -> PointCloud {
    lidar_to_camera(&frame.cloud, &frame.calib)
}

#[test]
fn empty_world_sees_only_ground_and_sky() {
    let cam = CameraConfig::default();
    let frames = render_frames(&empty_world(3), &cam, &LidarConfig::default()).unwrap();
    let f = &frames[0];
    let colors: std::collections::BTreeSet<[u8; 3]> = (0..cam.height).flat_map(|y| (0..cam.width).map(move |x| (x, y))).map(|(x, y)| f.image.pixel(x, y)).collect();
    assert_eq!(colors, [[40, 40, 40], [150, 180, 230], [200, 200, 200]].into_iter().collect());
    // upper half is sky, lower half ground
    assert_eq!(f.image.pixel(10, 5), [150, 180, 230]);
    assert_ne!(f.image.pixel(10, 60), [150, 180, 230]);
    assert!(!f.cloud.is_empty());
    for p in &camera_cloud(f).points {
        assert!((p[1] - 1.65).abs() < 1e-9, "non-ground return {p:?}");
    }
}

#[test]
fn box_on_the_optical_axis_covers_its_projected_corners() {
    let cam = CameraConfig::default();
    let b = SimBox {
        center: [0.0, 0.0, 10.0],
        size: [2.0, 2.0, 2.0],
        velocity: [0.0; 3],
        albedo: [255, 0, 0],
    };
    let world = World {
        boxes: vec![b],
        ..empty_world(2)
    };
    let img = render_image(&world, 0, &cam);
    let mut corners = vec![];
    for dx in [-1.0, 1.0] {
        for dy in [-1.0, 1.0] {
            for dz in [-1.0, 1.0] {
                corners.push([dx, dy, 10.0 + dz, 0.0]);
            }
        }
    }
    let px = project_to_pixels(&PointCloud::new(corners), &cam.projection(), cam.width, cam.height, 0.1);
    assert_eq!(px.len(), 8);
    let (u0, u1) = px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.u), b.max(p.u)));
    let (v0, v1) = px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.v), b.max(p.v)));
    let red: Vec<(usize, usize)> = (0..cam.height)
        .flat_map(|y| (0..cam.width).map(move |x| (x, y)))
        .filter(|&(x, y)| img.pixel(x, y) == [255, 0, 0])
        .collect();
    let rx0 = red.iter().map(|p| p.0).min().unwrap() as f64;
    let rx1 = red.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
    let ry0 = red.iter().map(|p| p.1).min().unwrap() as f64;
    let ry1 = red.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
    for (got, want) in [(rx0, u0), (rx1, u1), (ry0, v0), (ry1, v1)] {
        assert!((got - want).abs() <= 1.0, "footprint edge {got} vs projected {want}");
    }
}

#[test]
fn straight_static_drive_has_constant_ego_motion() {
    let world = World {
        boxes: vec![SimBox {
            center: [3.0, 0.9, 8.0],
            size: [1.0, 1.5, 1.0],
            velocity: [0.0; 3],
            albedo: [10, 200, 10],
        }],
        ..empty_world(12)
    };
    let lf = synth_sequence(&world, &CameraConfig::default(), &LidarConfig::default(), &LabelConfig::default()).unwrap();
    assert!(!lf.is_empty());
    for f in &lf {
        assert_eq!(f.ego_delta, lf[0].ego_delta);
    }
    assert_eq!(lf[0].ego_delta, [0.0, 0.0, 1.0]);

    let one = World {
        trajectory: straight(1, 1.0),
        ..world
    };
    assert!(matches!(synth_sequence(&one, &CameraConfig::default(), &LidarConfig::default(), &LabelConfig::default()), Err(Error::Config(_))));
    let bad = CameraConfig {
        focal: 0.0,
        ..Default::default()
    };
    assert!(matches!(synth_sequence(&empty_world(3), &bad, &LidarConfig::default(), &LabelConfig::default()), Err(Error::Config(_))));
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn checkerboard(n: usize) -> Image {
    let mut img = Image::filled(n, n, [0, 0, 0]);
    for y in 0..n {
        for x in 0..n {
            if (x + y) % 2 == 0 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
    }
    img
}

#[test]
fn image_degradation_examples() {
    let mut r = rng(1);
    let img = Image::new(16, 16, (0..16 * 16 * 3).map(|_| r.gen()).collect()).unwrap();
    assert_eq!(degrade_image(&img, &DegradationSpec::NEUTRAL, &mut rng(0)).unwrap(), img);

    let blur = DegradationSpec {
        image_blur_radius: 3,
        ..DegradationSpec::NEUTRAL
    };
    let flat = Image::filled(12, 9, [17, 99, 201]);
    assert_eq!(degrade_image(&flat, &blur, &mut rng(0)).unwrap(), flat);

    let board = checkerboard(16);
    let one = DegradationSpec {
        image_blur_radius: 1,
        ..DegradationSpec::NEUTRAL
    };
    let tau = 1e7;
    assert!(reliability_image(&degrade_image(&board, &one, &mut rng(0)).unwrap(), tau) < reliability_image(&board, tau));

    let dark = DegradationSpec {
        brightness_scale: 0.5,
        ..DegradationSpec::NEUTRAL
    };
    let d = degrade_image(&Image::filled(2, 2, [200, 101, 0]), &dark, &mut rng(0)).unwrap();
    assert_eq!(d.pixel(0, 0), [100, 51, 0]);

    let bad = DegradationSpec {
        brightness_scale: -1.0,
        ..DegradationSpec::NEUTRAL
    };
    assert!(matches!(degrade_image(&img, &bad, &mut rng(0)), Err(Error::Config(_))));
}

#[test]
fn cloud_degradation_examples() {
    let mut r = rng(2);
    let cloud = PointCloud::new((0..10_000).map(|_| [r.gen_range(1.0..30.0), r.gen_range(-5.0..5.0), r.gen_range(-1.0..1.0), r.gen()]).collect());
    assert_eq!(degrade_cloud(&cloud, &DegradationSpec::NEUTRAL, &mut rng(0)).unwrap(), cloud);

    let half = DegradationSpec {
        cloud_dropout: 0.5,
        ..DegradationSpec::NEUTRAL
    };
    let kept = degrade_cloud(&cloud, &half, &mut rng(3)).unwrap().len() as f64;
    // two-sided 99.9% normal bound of Binomial(10⁴, 0.5)
    let bound = 3.2905 * (10_000.0f64 * 0.25).sqrt();
    assert!((kept - 5000.0).abs() <= bound, "{kept} survivors");

    let jitter = DegradationSpec {
        cloud_jitter_sigma: 0.05,
        ..DegradationSpec::NEUTRAL
    };
    let j = degrade_cloud(&cloud, &jitter, &mut rng(4)).unwrap();
    assert_eq!(j.len(), cloud.len());
    let sq: f64 = j.points.iter().zip(&cloud.points).map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()).sum();
    let sigma = (sq / (3.0 * cloud.len() as f64)).sqrt();
    assert!((sigma - 0.05).abs() < 0.002, "{sigma}");
    assert!(j.points.iter().zip(&cloud.points).all(|(a, b)| a[3] == b[3]));

    let bad = DegradationSpec {
        cloud_dropout: 1.0,
        ..DegradationSpec::NEUTRAL
    };
    assert!(degrade_cloud(&cloud, &bad, &mut rng(0)).is_err());
}

#[test]
fn dropout_lowers_cloud_reliability() {
    let cfg = SimConfig {
        frames: 3,
        ..Default::default()
    };
    let f = &synth_scenario(Scenario::Standard, &cfg, 5).unwrap()[0];
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let n_ref = 1024.0;
    let before = reliability_cloud(&f.cloud, &f.calib, w, h, n_ref, 0.1);
    let half = DegradationSpec {
        cloud_dropout: 0.5,
        ..DegradationSpec::NEUTRAL
    };
    let after = reliability_cloud(&degrade_cloud(&f.cloud, &half, &mut rng(1)).unwrap(), &f.calib, w, h, n_ref, 0.1);
    assert!(after < before);
}

#[test]
fn presets_match_their_definitions() {
    assert_eq!(preset_scenario("standard").unwrap().1, DegradationSpec::NEUTRAL);
    let (dynamic, spec) = preset_scenario("dynamic").unwrap();
    assert_eq!((dynamic.box_speed, spec), (0.5, DegradationSpec::NEUTRAL));
    let (world, spec) = preset_scenario("low_light").unwrap();
    assert_eq!(world.box_speed, 0.0);
    assert_eq!((spec.image_blur_radius, spec.brightness_scale, spec.image_noise_sigma), (1, 0.3, 8.0));
    assert_eq!((spec.cloud_dropout, spec.cloud_jitter_sigma), (0.0, 0.0));
    let (_, spec) = preset_scenario("lidar_degraded").unwrap();
    assert_eq!((spec.image_blur_radius, spec.brightness_scale, spec.image_noise_sigma), (0, 1.0, 0.0));
    assert_eq!((spec.cloud_dropout, spec.cloud_jitter_sigma), (0.5, 0.05));
    assert!(matches!(preset_scenario("foggy"), Err(Error::Config(_))));
}

#[test]
fn degraded_presets_lower_the_matching_reliability() {
    let cfg = SimConfig {
        frames: 12,
        ..Default::default()
    };
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let standard = synth_scenario(Scenario::Standard, &cfg, 11).unwrap();
    let low = synth_scenario(Scenario::LowLight, &cfg, 11).unwrap();
    let sparse = synth_scenario(Scenario::LidarDegraded, &cfg, 11).unwrap();
    for t in 0..cfg.frames {
        let tau = 1e4;
        assert!(reliability_image(&low[t].image, tau) < reliability_image(&standard[t].image, tau), "frame {t}");
        let rc = |f: &fusenav::data::Frame| reliability_cloud(&f.cloud, &f.calib, w, h, 1024.0, 0.1);
        assert!(rc(&sparse[t]) < rc(&standard[t]), "frame {t}");
    }
}

#[test]
fn synthesis_is_seed_deterministic() {
    let cfg = SimConfig {
        frames: 6,
        ..Default::default()
    };
    for s in Scenario::ALL {
        assert_eq!(synth_scenario(s, &cfg, 9).unwrap(), synth_scenario(s, &cfg, 9).unwrap());
    }
    assert_ne!(synth_scenario(Scenario::Standard, &cfg, 9).unwrap(), synth_scenario(Scenario::Standard, &cfg, 10).unwrap());
}

#[test]
fn ray_cast_returns_land_inside_the_image() {
    let cfg = SimConfig {
        frames: 20,
        ..Default::default()
    };
    for s in [Scenario::Standard, Scenario::Dynamic] {
        for f in synth_scenario(s, &cfg, 21).unwrap() {
            let cam = camera_cloud(&f);
            let inside = project_to_pixels(&cam, &f.calib.p, cfg.camera.width, cfg.camera.height, 0.1).len();
            assert!(inside as f64 >= 0.99 * f.cloud.len() as f64, "{inside}/{}", f.cloud.len());
        }
    }
}
