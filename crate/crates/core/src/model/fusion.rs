//! Semantic alignment, per-modality reliability and the reliability-gated
//! convex combination of the two branch features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationSet, Image, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{lidar_to_camera, project_to_pixels};
use crate::model::{kaiming, zeros};
use crate::numeric::{Graph, ParamRegistry, Tensor, Var};
use crate::scalar::Scalar;

/// Lower clamp of every reliability score; keeps `ln r` finite for a dead sensor.
pub const RELIABILITY_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub fusion_dim: usize,
    /// Weight of the `ln r` prior in the gate logits; 0 disables it.
    pub beta: f64,
    /// Laplacian-variance scale of the image reliability.
    pub tau_img: f64,
    /// In-frustum point count at which the cloud reliability saturates.
    pub n_ref: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            fusion_dim: 64,
            beta: 1.0,
            tau_img: 100.0,
            n_ref: 1024.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_dim == 0 {
            return Err(Error::config("fusion: fusion_dim must be positive"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("fusion: beta must be >= 0"));
        }
        if !(self.tau_img > 0.0 && self.n_ref > 0.0) {
            return Err(Error::config("fusion: tau_img and n_ref must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityScores {
    pub r_rgb: f64,
    pub r_lidar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w_rgb: f64,
    pub w_lidar: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T> {
    pub vector: Tensor<T>,
    pub weights: FusionWeights,
    pub reliabilities: ReliabilityScores,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Rgb,
    Lidar,
}

impl Which {
    fn tag(self) -> &'static str {
        match self {
            Which::Rgb => "rgb",
            Which::Lidar => "lidar",
        }
    }
}

pub(crate) fn register<T: Scalar, R: Rng + ?Sized>(
    cfg: &FusionConfig,
    rgb_dim: usize,
    lidar_dim: usize,
    reg: &mut ParamRegistry<T>,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let f = cfg.fusion_dim;
    for (m, d) in [("rgb", rgb_dim), ("lidar", lidar_dim)] {
        kaiming(reg, format!("fusion.map_{m}.w"), &[d, f], d, rng)?;
        zeros(reg, format!("fusion.map_{m}.b"), &[1, f])?;
    }
    kaiming(reg, "fusion.gate.v".into(), &[f, f], f, rng)?;
    zeros(reg, "fusion.gate.u_rgb".into(), &[f, 1])?;
    zeros(reg, "fusion.gate.u_lidar".into(), &[f, 1])?;
    Ok(())
}

/// Variance of the 4-neighbor Laplacian of the channel-mean gray image over
/// interior pixels; 0 for images without an interior.
pub fn laplacian_variance(image: &Image) -> f64 {
    let (w, h) = (image.width, image.height);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let gray = image.gray();
    let n = ((w - 2) * (h - 2)) as f64;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let l = gray[i - w] + gray[i + w] + gray[i - 1] + gray[i + 1] - 4.0 * gray[i];
            sum += l;
            sq += l * l;
        }
    }
    let mean = sum / n;
    (sq / n - mean * mean).max(0.0)
}

/// `clamp(1 − exp(−v/τ), ε, 1)` of the Laplacian variance `v`.
pub fn reliability_image(image: &Image, tau_img: f64) -> f64 {
    let v = laplacian_variance(image);
    (1.0 - (-v / tau_img).exp()).clamp(RELIABILITY_FLOOR, 1.0)
}

pub fn reliability_from_count(n: usize, n_ref: f64) -> f64 {
    (n as f64 / n_ref).clamp(RELIABILITY_FLOOR, 1.0)
}

/// In-frustum point density of a LiDAR-frame cloud.
pub fn reliability_cloud(cloud: &PointCloud, calib: &CalibrationSet, width: usize, height: usize, n_ref: f64, z_near: f64) -> f64 {
    let cam = lidar_to_camera(cloud, calib);
    reliability_from_count(project_to_pixels(&cam, &calib.p, width, height, z_near).len(), n_ref)
}

/// Per-modality affine map into the shared space, then `tanh`.
pub fn semantic_map<T: Scalar>(g: &mut Graph<T>, params: &ParamRegistry<T>, f: Var, which: Which) -> Result<Var> {
    let w = g.param(params, &format!("fusion.map_{}.w", which.tag()))?;
    let b = g.param(params, &format!("fusion.map_{}.b", which.tag()))?;
    let expected = g.shape(w)[0];
    if g.value(f).len() != expected {
        return Err(Error::dim(format!(
            "semantic_map({}): feature of {} entries, expected {expected}",
            which.tag(),
            g.value(f).len()
        )));
    }
    let f = g.reshape(f, &[1, expected])?;
    let y = g.linear(f, w, Some(b))?;
    g.tanh(y)
}

/// Gate logits `u_mᵀ tanh(V f_m) + β ln r_m`, softmaxed into `[1×2]`
/// weights ordered `(rgb, lidar)`.
pub fn fusion_weights<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamRegistry<T>,
    f_rgb: Var,
    f_lidar: Var,
    rel: ReliabilityScores,
    beta: f64,
) -> Result<Var> {
    for (r, m) in [(rel.r_rgb, "rgb"), (rel.r_lidar, "lidar")] {
        if !(RELIABILITY_FLOOR..=1.0).contains(&r) {
            return Err(Error::contract(format!("reliability r_{m} = {r} outside [{RELIABILITY_FLOOR}, 1]")));
        }
    }
    if !(beta >= 0.0) {
        return Err(Error::contract(format!("beta = {beta} must be >= 0")));
    }
    let v = g.param(params, "fusion.gate.v")?;
    let mut logits = Vec::with_capacity(2);
    for (f, m, r) in [(f_rgb, "rgb", rel.r_rgb), (f_lidar, "lidar", rel.r_lidar)] {
        let u = g.param(params, &format!("fusion.gate.u_{m}"))?;
        let hidden = g.matmul(f, v)?;
        let act = g.tanh(hidden)?;
        let content = g.matmul(act, u)?;
        logits.push(g.affine(content, T::one(), T::of(beta * r.ln()))?);
    }
    let cat = g.concat_cols(&logits)?;
    g.softmax(cat)
}

/// `w_rgb · f_rgb + w_lidar · f_lidar`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, f_rgb: Var, f_lidar: Var, weights: Var) -> Result<Var> {
    let a = g.index(weights, 0)?;
    let b = g.index(weights, 1)?;
    let x = g.mul_scalar(f_rgb, a)?;
    let y = g.mul_scalar(f_lidar, b)?;
    g.add(x, y)
}

pub(crate) fn weights_of<T: Scalar>(g: &Graph<T>, weights: Var) -> FusionWeights {
    let w = g.value(weights).data();
    FusionWeights {
        w_rgb: w[0].as_f64(),
        w_lidar: w[1].as_f64(),
    }
}
