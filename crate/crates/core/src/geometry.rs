//! LiDAR-to-image correspondence: rigid transforms, pinhole projection and
//! sparse depth rasterization.

use nalgebra::{Matrix3x4, Vector4};
use serde::{Deserialize, Serialize};

use crate::data::{CalibrationSet, PointCloud};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z, meters.
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub z_near: f64,
    pub depth_max: f64,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            z_near: 0.1,
            depth_max: 80.0,
        }
    }
}

/// Applies `Tr` to every point; reflectance is carried through.
pub fn lidar_to_camera(cloud: &PointCloud, calib: &CalibrationSet) -> PointCloud {
    let tr = calib.tr;
    PointCloud::new(
        cloud
            .points
            .iter()
            .map(|p| {
                let c = tr * Vector4::new(p[0], p[1], p[2], 1.0);
                [c.x, c.y, c.z, p[3]]
            })
            .collect(),
    )
}

/// Projects camera-frame points through `p`, keeping those with `z > z_near`
/// that land inside `[0, width) × [0, height)`, in input order.
pub fn project_to_pixels(cloud_cam: &PointCloud, p: &Matrix3x4<f64>, width: usize, height: usize, z_near: f64) -> Vec<PixelPoint> {
    project_indexed(cloud_cam, p, width, height, z_near)
        .into_iter()
        .map(|(_, px)| px)
        .collect()
}

/// Like [`project_to_pixels`] but also returns each retained point's index.
pub fn project_indexed(cloud_cam: &PointCloud, p: &Matrix3x4<f64>, width: usize, height: usize, z_near: f64) -> Vec<(usize, PixelPoint)> {
    let (w, h) = (width as f64, height as f64);
    cloud_cam
        .points
        .iter()
        .enumerate()
        .filter(|(_, q)| q[2] > z_near)
        .filter_map(|(i, q)| {
            let s = p * Vector4::new(q[0], q[1], q[2], 1.0);
            let (u, v) = (s.x / s.z, s.y / s.z);
            (u >= 0.0 && u < w && v >= 0.0 && v < h).then_some((i, PixelPoint { u, v, depth: q[2] }))
        })
        .collect()
}

/// Minimum-depth z-buffer on a `height/cell × width/cell` grid, normalized by
/// `depth_max` and clamped to `[0, 1]`; empty cells are 0. Returns `[1×H'×W']`.
pub fn render_sparse_depth<T: Scalar>(pixels: &[PixelPoint], width: usize, height: usize, cell: usize, depth_max: f64) -> Result<Tensor<T>> {
    if cell == 0 || width % cell != 0 || height % cell != 0 {
        return Err(Error::config(format!("depth cell {cell} does not divide {width}x{height}")));
    }
    if depth_max <= 0.0 {
        return Err(Error::config("depth_max must be positive"));
    }
    let (gw, gh) = (width / cell, height / cell);
    let mut zbuf = vec![f64::INFINITY; gw * gh];
    for px in pixels {
        let (cx, cy) = ((px.u as usize) / cell, (px.v as usize) / cell);
        if cx < gw && cy < gh {
            let z = &mut zbuf[cy * gw + cx];
            *z = z.min(px.depth);
        }
    }
    let data = zbuf
        .into_iter()
        .map(|z| if z.is_finite() { T::of((z / depth_max).clamp(0.0, 1.0)) } else { T::zero() })
        .collect();
    Tensor::new(&[1, gh, gw], data)
}

/// Coarsens a `[1×H×W]` normalized depth map by `factor`, keeping the
/// smallest non-zero value per block. Equals rendering with `cell * factor`
/// as long as no depth was clamped at 1.
pub fn min_pool_depth<T: Scalar>(depth: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (h, w) = match depth.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::dim(format!("depth map must be 1xHxW, got {s:?}"))),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!("pool factor {factor} does not divide {w}x{h}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = depth.data();
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        for x in 0..w {
            let d = src[y * w + x];
            if d > T::zero() {
                let o = &mut out[(y / factor) * ow + x / factor];
                if *o == T::zero() || d < *o {
                    *o = d;
                }
            }
        }
    }
    Tensor::new(&[1, oh, ow], out)
}
