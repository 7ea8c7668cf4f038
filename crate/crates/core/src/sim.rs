//! Synthetic paired camera / LiDAR sequences: a checkered ground plane with
//! flat-shaded boxes, a constant-speed ego trajectory with scripted yaw,
//! per-pixel ray casting for the image and a LiDAR ray grid over the camera
//! frustum. Scenario presets add moving boxes or sensor degradation.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{derive_labels, CalibrationSet, Frame, Image, LabelConfig, LabeledFrame, PointCloud, Pose, FRAME_RATE_HZ};
use crate::error::{Error, Result};
use crate::numeric::rng;

const SKY: [u8; 3] = [150, 180, 230];
const GROUND_LIGHT: u8 = 200;
const GROUND_DARK: u8 = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length, pixels; the principal point is the image center.
    pub focal: f64,
    /// Camera height above the ground, meters.
    pub mount_height: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            focal: 48.0,
            mount_height: 1.65,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.focal > 0.0) || !(self.mount_height > 0.0) {
            return Err(Error::config("camera: width, height, focal and mount_height must be positive"));
        }
        Ok(())
    }

    pub fn projection(&self) -> Matrix3x4<f64> {
        let (cx, cy) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
        Matrix3x4::new(self.focal, 0.0, cx, 0.0, 0.0, self.focal, cy, 0.0, 0.0, 0.0, 1.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    pub azimuth_rays: usize,
    pub elevation_rays: usize,
    pub max_range: f64,
    /// Position of the LiDAR origin in camera coordinates. The LiDAR axes
    /// are x forward, y left, z up.
    pub offset: [f64; 3],
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            azimuth_rays: 64,
            elevation_rays: 16,
            max_range: 80.0,
            offset: [0.0, -0.08, -0.27],
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.azimuth_rays == 0 || self.elevation_rays == 0 || !(self.max_range > 0.0) {
            return Err(Error::config("lidar: ray counts and max_range must be positive"));
        }
        Ok(())
    }

    /// LiDAR-to-camera rigid transform.
    pub fn extrinsic(&self) -> Matrix4<f64> {
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        // camera-frame position of the LiDAR origin is `offset`, so Tr·0 = offset
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(self.offset));
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// World displacement per frame.
    pub velocity: [f64; 3],
    pub albedo: [u8; 3],
}

impl SimBox {
    fn at(&self, frame: usize) -> ([f64; 3], [f64; 3]) {
        let f = frame as f64;
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for k in 0..3 {
            let c = self.center[k] + self.velocity[k] * f;
            lo[k] = c - self.size[k] / 2.0;
            hi[k] = c + self.size[k] / 2.0;
        }
        (lo, hi)
    }
}

/// World coordinates share the camera axes of the first pose: x right, y down,
/// z forward; the ground is the plane `y = ground_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub ground_y: f64,
    pub checker: f64,
    pub boxes: Vec<SimBox>,
    pub trajectory: Vec<Pose>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldParams {
    pub boxes: usize,
    /// Box speed, meters per frame; 0 for a static scene.
    pub box_speed: f64,
    /// Ego speed, meters per frame.
    pub ego_speed: f64,
    pub yaw_amplitude: f64,
    pub yaw_period: f64,
    pub checker: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            boxes: 8,
            box_speed: 0.0,
            ego_speed: 1.0,
            yaw_amplitude: 0.35,
            yaw_period: 40.0,
            checker: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    pub image_blur_radius: usize,
    pub brightness_scale: f64,
    pub image_noise_sigma: f64,
    pub cloud_dropout: f64,
    pub cloud_jitter_sigma: f64,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self::NEUTRAL
    }
}

impl DegradationSpec {
    pub const NEUTRAL: Self = Self {
        image_blur_radius: 0,
        brightness_scale: 1.0,
        image_noise_sigma: 0.0,
        cloud_dropout: 0.0,
        cloud_jitter_sigma: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cloud_dropout) {
            return Err(Error::config("degradation: cloud_dropout must be in [0, 1)"));
        }
        if !(self.brightness_scale >= 0.0 && self.image_noise_sigma >= 0.0 && self.cloud_jitter_sigma >= 0.0) {
            return Err(Error::config("degradation: scales must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Standard,
    Dynamic,
    LowLight,
    LidarDegraded,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Standard, Scenario::Dynamic, Scenario::LowLight, Scenario::LidarDegraded];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Standard => "standard",
            Scenario::Dynamic => "dynamic",
            Scenario::LowLight => "low_light",
            Scenario::LidarDegraded => "lidar_degraded",
        }
    }

    pub fn is_special(self) -> bool {
        self != Scenario::Standard
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown scenario '{s}' (standard|dynamic|low_light|lidar_degraded)")))
    }
}

pub fn preset_scenario(name: &str) -> Result<(WorldParams, DegradationSpec)> {
    Ok(preset(name.parse()?))
}

pub fn preset(s: Scenario) -> (WorldParams, DegradationSpec) {
    let world = WorldParams::default();
    match s {
        Scenario::Standard => (world, DegradationSpec::NEUTRAL),
        Scenario::Dynamic => (
            WorldParams {
                box_speed: 0.5,
                ..world
            },
            DegradationSpec::NEUTRAL,
        ),
        Scenario::LowLight => (
            world,
            DegradationSpec {
                image_blur_radius: 1,
                brightness_scale: 0.3,
                image_noise_sigma: 8.0,
                ..DegradationSpec::NEUTRAL
            },
        ),
        Scenario::LidarDegraded => (
            world,
            DegradationSpec {
                cloud_dropout: 0.5,
                cloud_jitter_sigma: 0.05,
                ..DegradationSpec::NEUTRAL
            },
        ),
    }
}

fn yaw_pose(yaw: f64, p: Vector3<f64>) -> Pose {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).into_inner();
    Pose::from_rotation_translation(r, p)
}

/// Samples boxes beside the path and a trajectory of `frames` poses.
pub fn build_world<R: Rng + ?Sized>(params: &WorldParams, cam: &CameraConfig, frames: usize, rng: &mut R) -> World {
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut p = Vector3::zeros();
    let mut trajectory = Vec::with_capacity(frames);
    for t in 0..frames {
        let yaw = params.yaw_amplitude * (std::f64::consts::TAU * t as f64 / params.yaw_period + phase).sin()
            - params.yaw_amplitude * phase.sin();
        trajectory.push(yaw_pose(yaw, p));
        p += params.ego_speed * Vector3::new(yaw.sin(), 0.0, yaw.cos());
    }
    let ground_y = cam.mount_height;
    let boxes = (0..params.boxes)
        .map(|_| {
            let anchor = rng.gen_range(0..frames.max(1));
            let ahead = rng.gen_range(4.0..12.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 } * rng.gen_range(2.5..6.0);
            let size = [rng.gen_range(0.8..2.0), rng.gen_range(1.0..2.5), rng.gen_range(0.8..2.0)];
            let heading = rng.gen_range(0.0..std::f64::consts::TAU);
            let albedo = [rng.gen_range(20..236), rng.gen_range(20..236), rng.gen_range(20..236)];
            let pose = trajectory.get(anchor).cloned().unwrap_or_else(Pose::identity);
            let base = pose.translation() + pose.rotation() * Vector3::new(side, 0.0, ahead);
            SimBox {
                center: [base.x, ground_y - size[1] / 2.0, base.z],
                size,
                velocity: [params.box_speed * heading.cos(), 0.0, params.box_speed * heading.sin()],
                albedo,
            }
        })
        .collect();
    World {
        ground_y,
        checker: params.checker,
        boxes,
        trajectory,
    }
}

struct Hit {
    t: f64,
    color: [u8; 3],
    reflectance: f64,
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, lo: &[f64; 3], hi: &[f64; 3]) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1 && t0 > 0.0).then_some(t0)
}

/// Nearest intersection along `o + t·d`; `t` equals camera-frame depth because
/// `d` is the world image of a camera ray with unit z.
fn cast(world: &World, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    if d.y > 1e-12 {
        let t = (world.ground_y - o.y) / d.y;
        if t > 0.0 {
            let p = o + d * t;
            let cell = (p.x / world.checker).floor() as i64 + (p.z / world.checker).floor() as i64;
            let level = if cell.rem_euclid(2) == 0 { GROUND_LIGHT } else { GROUND_DARK };
            best = Some(Hit {
                t,
                color: [level; 3],
                reflectance: level as f64 / 255.0,
            });
        }
    }
    for b in &world.boxes {
        let (lo, hi) = b.at(frame);
        if let Some(t) = ray_box(o, d, &lo, &hi) {
            if best.as_ref().map_or(true, |h| t < h.t) {
                let refl = b.albedo.iter().map(|&c| c as f64).sum::<f64>() / (3.0 * 255.0);
                best = Some(Hit {
                    t,
                    color: b.albedo,
                    reflectance: refl,
                });
            }
        }
    }
    best
}

fn camera_ray(cam: &CameraConfig, u: f64, v: f64) -> Vector3<f64> {
    let (cx, cy) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    Vector3::new((u - cx) / cam.focal, (v - cy) / cam.focal, 1.0)
}

pub fn render_image(world: &World, frame: usize, cam: &CameraConfig) -> Image {
    let pose = &world.trajectory[frame];
    let (r, o) = (pose.rotation(), pose.translation());
    let mut img = Image::filled(cam.width, cam.height, SKY);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let d = r * camera_ray(cam, x as f64 + 0.5, y as f64 + 0.5);
            if let Some(h) = cast(world, frame, &o, &d) {
                img.set_pixel(x, y, h.color);
            }
        }
    }
    img
}

/// Pixel centers sampled by the LiDAR grid.
pub fn lidar_pixels(cam: &CameraConfig, lidar: &LidarConfig) -> Vec<(f64, f64)> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let (na, ne) = (lidar.azimuth_rays, lidar.elevation_rays);
    let mut out = Vec::with_capacity(na * ne);
    for j in 0..ne {
        let v = ((j as f64 + 0.5) * h / ne as f64).floor() + 0.5;
        for i in 0..na {
            let u = ((i as f64 + 0.5) * w / na as f64).floor() + 0.5;
            out.push((u, v));
        }
    }
    out
}

/// Ray-cast scan in LiDAR coordinates. Rays leave the camera center through
/// the grid's pixel centers, so every return re-projects onto its pixel.
pub fn scan_cloud(world: &World, frame: usize, cam: &CameraConfig, lidar: &LidarConfig) -> PointCloud {
    let pose = &world.trajectory[frame];
    let (r, o) = (pose.rotation(), pose.translation());
    let to_lidar = crate::data::rigid_inverse(&lidar.extrinsic());
    let mut points = Vec::new();
    for (u, v) in lidar_pixels(cam, lidar) {
        let dc = camera_ray(cam, u, v);
        if let Some(h) = cast(world, frame, &o, &(r * dc)) {
            if h.t > lidar.max_range {
                continue;
            }
            let pc = dc * h.t;
            let pl = to_lidar * Vector4::new(pc.x, pc.y, pc.z, 1.0);
            points.push([pl.x, pl.y, pl.z, h.reflectance]);
        }
    }
    PointCloud::new(points)
}

/// Renders every trajectory pose into a raw frame.
pub fn render_frames(world: &World, cam: &CameraConfig, lidar: &LidarConfig) -> Result<Vec<Frame>> {
    cam.validate()?;
    lidar.validate()?;
    let calib = CalibrationSet::new(cam.projection(), lidar.extrinsic())?;
    Ok((0..world.trajectory.len())
        .map(|t| Frame {
            index: t,
            image: render_image(world, t, cam),
            cloud: scan_cloud(world, t, cam, lidar),
            calib: calib.clone(),
            pose: world.trajectory[t].clone(),
            timestamp: t as f64 / FRAME_RATE_HZ,
        })
        .collect())
}

/// Keeps the frames that have labels, attaching them.
pub fn label_frames(frames: Vec<Frame>, labels: &LabelConfig) -> Result<Vec<LabeledFrame>> {
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose.clone()).collect();
    let derived = derive_labels(&poses, labels)?;
    Ok(frames
        .into_iter()
        .zip(derived)
        .filter_map(|(frame, l)| {
            l.map(|(waypoint, ego_delta)| LabeledFrame {
                frame,
                waypoint,
                ego_delta,
            })
        })
        .collect())
}

pub fn synth_sequence(world: &World, cam: &CameraConfig, lidar: &LidarConfig, labels: &LabelConfig) -> Result<Vec<LabeledFrame>> {
    if world.trajectory.len() < 2 {
        return Err(Error::config("synth_sequence needs at least 2 frames"));
    }
    label_frames(render_frames(world, cam, lidar)?, labels)
}

/// One 3×3 mean pass with replicated borders.
fn box_blur3(buf: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; buf.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for dy in [-1i64, 0, 1] {
                    for dx in [-1i64, 0, 1] {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += buf[(yy * w + xx) * 3 + c];
                    }
                }
                out[(y * w + x) * 3 + c] = s / 9.0;
            }
        }
    }
    out
}

/// Box blur (`image_blur_radius` passes), brightness scale, then additive
/// Gaussian noise; clamped to `[0, 255]`.
pub fn degrade_image<R: Rng + ?Sized>(image: &Image, spec: &DegradationSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let (w, h) = (image.width, image.height);
    let mut buf: Vec<f64> = image.pixels.iter().map(|&p| p as f64).collect();
    for _ in 0..spec.image_blur_radius {
        buf = box_blur3(&buf, w, h);
    }
    if spec.brightness_scale != 1.0 {
        buf.iter_mut().for_each(|p| *p = (*p * spec.brightness_scale).min(255.0));
    }
    if spec.image_noise_sigma > 0.0 {
        let n = Normal::new(0.0, spec.image_noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        buf.iter_mut().for_each(|p| *p += n.sample(rng));
    }
    let pixels = buf.into_iter().map(|p| p.round().clamp(0.0, 255.0) as u8).collect();
    Image::new(w, h, pixels)
}

/// Independent point dropout, then isotropic Gaussian jitter of survivors.
pub fn degrade_cloud<R: Rng + ?Sized>(cloud: &PointCloud, spec: &DegradationSpec, rng: &mut R) -> Result<PointCloud> {
    spec.validate()?;
    let jitter = if spec.cloud_jitter_sigma > 0.0 {
        Some(Normal::new(0.0, spec.cloud_jitter_sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cloud.len());
    for p in &cloud.points {
        if spec.cloud_dropout > 0.0 && rng.gen::<f64>() < spec.cloud_dropout {
            continue;
        }
        let mut q = *p;
        if let Some(n) = &jitter {
            for v in q.iter_mut().take(3) {
                *v += n.sample(rng);
            }
        }
        out.push(q);
    }
    Ok(PointCloud::new(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub camera: CameraConfig,
    pub lidar: LidarConfig,
    pub frames: usize,
    pub scenarios: Vec<Scenario>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            camera: CameraConfig::default(),
            lidar: LidarConfig::default(),
            frames: 50,
            scenarios: Scenario::ALL.to_vec(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        self.lidar.validate()?;
        if self.frames < 2 {
            return Err(Error::config("sim: frames must be >= 2"));
        }
        Ok(())
    }
}

/// Raw frames of one preset. The world depends only on `seed` and the preset's
/// world parameters, so static presets share geometry for a given seed.
pub fn synth_scenario(scenario: Scenario, cfg: &SimConfig, seed: u64) -> Result<Vec<Frame>> {
    cfg.validate()?;
    let (params, spec) = preset(scenario);
    let world = build_world(&params, &cfg.camera, cfg.frames, &mut rng::stream(seed, "world"));
    let mut frames = render_frames(&world, &cfg.camera, &cfg.lidar)?;
    let mut noise = rng::stream(seed, &format!("degrade/{}", scenario.name()));
    for f in &mut frames {
        f.image = degrade_image(&f.image, &spec, &mut noise)?;
        f.cloud = degrade_cloud(&f.cloud, &spec, &mut noise)?;
    }
    Ok(frames)
}
