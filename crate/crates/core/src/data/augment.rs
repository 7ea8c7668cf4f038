use nalgebra::{Rotation3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledFrame;

/// Ranges the training augmentations are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Contrast factor range about 128.
    pub contrast: [f64; 2],
    /// Brightness offset range, in gray levels.
    pub brightness: [f64; 2],
    /// Yaw range (degrees, symmetric) about the camera vertical axis.
    pub yaw_deg: f64,
    pub jitter_sigma: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            flip_prob: 0.5,
            contrast: [0.8, 1.2],
            brightness: [-20.0, 20.0],
            yaw_deg: 5.0,
            jitter_sigma: 0.01,
        }
    }
}

/// One concrete draw from an [`AugmentPolicy`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub alpha: f64,
    pub delta: f64,
    pub yaw_rad: f64,
    pub jitter_sigma: f64,
}

impl AugmentParams {
    pub const NEUTRAL: AugmentParams = AugmentParams {
        flip: false,
        alpha: 1.0,
        delta: 0.0,
        yaw_rad: 0.0,
        jitter_sigma: 0.0,
    };
}

impl AugmentPolicy {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentParams {
        if !self.enabled {
            return AugmentParams::NEUTRAL;
        }
        let uniform = |rng: &mut R, [lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        AugmentParams {
            flip: rng.gen::<f64>() < self.flip_prob,
            alpha: uniform(rng, self.contrast),
            delta: uniform(rng, self.brightness),
            yaw_rad: uniform(rng, [-self.yaw_deg, self.yaw_deg]).to_radians(),
            jitter_sigma: self.jitter_sigma,
        }
    }
}

pub fn augment_frame<R: Rng + ?Sized>(lf: &LabeledFrame, rng: &mut R, policy: &AugmentPolicy) -> LabeledFrame {
    let params = policy.draw(rng);
    apply_augmentation(lf, &params, rng)
}

/// Applies `params`: horizontal flip (image columns mirrored, camera-frame x
/// negated, lateral label components negated), brightness-contrast
/// `α(p − 128) + 128 + δ`, yaw about the camera y axis applied to points and
/// labels, then per-point Gaussian jitter. `rng` is used for jitter only.
pub fn apply_augmentation<R: Rng + ?Sized>(lf: &LabeledFrame, params: &AugmentParams, rng: &mut R) -> LabeledFrame {
    let mut out = lf.clone();
    let frame = &mut out.frame;
    if params.flip {
        frame.image = frame.image.mirrored();
        out.waypoint[1] = -out.waypoint[1];
        out.ego_delta[0] = -out.ego_delta[0];
    }
    if params.alpha != 1.0 || params.delta != 0.0 {
        for p in frame.image.pixels.iter_mut() {
            let v = params.alpha * (*p as f64 - 128.0) + 128.0 + params.delta;
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
    }

    let yaw = *Rotation3::from_axis_angle(&Vector3::y_axis(), params.yaw_rad).matrix();
    let touches_cloud = params.flip || params.yaw_rad != 0.0 || params.jitter_sigma > 0.0;
    if touches_cloud {
        let tr = frame.calib.tr;
        let tr_inv = frame.calib.tr_inverse();
        let jitter = (params.jitter_sigma > 0.0).then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma > 0"));
        for p in frame.cloud.points.iter_mut() {
            let cam = tr * Vector4::new(p[0], p[1], p[2], 1.0);
            let mut c = Vector3::new(cam.x, cam.y, cam.z);
            if params.flip {
                c.x = -c.x;
            }
            c = yaw * c;
            if let Some(n) = &jitter {
                c += Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
            }
            let l = tr_inv * Vector4::new(c.x, c.y, c.z, 1.0);
            p[0] = l.x;
            p[1] = l.y;
            p[2] = l.z;
        }
    }
    if params.yaw_rad != 0.0 {
        let w = yaw * Vector3::new(out.waypoint[1], 0.0, out.waypoint[0]);
        out.waypoint = [w.z, w.x];
        let e = yaw * Vector3::from(out.ego_delta);
        out.ego_delta = [e.x, e.y, e.z];
    }
    out
}
