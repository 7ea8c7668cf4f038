use crate::error::{Error, Result};

/// LiDAR returns as `(x, y, z, reflectance)`; coordinates in meters in the
/// sensor frame (or the camera frame once transformed), reflectance in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xyz(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0], p[1], p[2]]
    }
}

/// Decodes a KITTI velodyne scan: packed little-endian `f32` quadruples.
///
/// Records with a non-finite coordinate are dropped; the second value is how
/// many. Reflectance is clamped to `[0, 1]`.
pub fn parse_velodyne_bin(bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(
            "velodyne scan",
            format!(
                "length {} is not a multiple of 16; trailing record starts at offset {}",
                bytes.len(),
                bytes.len() - bytes.len() % 16
            ),
        ));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0;
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        let p = [f(0), f(1), f(2), f(3)];
        if p.iter().all(|x| x.is_finite()) {
            points.push([p[0], p[1], p[2], p[3].clamp(0.0, 1.0)]);
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud { points }, dropped))
}

/// Inverse of [`parse_velodyne_bin`] for clouds holding `f32`-representable values.
pub fn serialize_velodyne_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for &x in p {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}
