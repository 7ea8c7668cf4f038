use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::data::calib::{extend_3x4, rigidity_error};
use crate::error::{Error, Result};

/// Camera-to-world rigid transform at one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub t: Matrix4<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { t: Matrix4::identity() }
    }

    pub fn from_rotation_translation(r: Matrix3<f64>, p: Vector3<f64>) -> Self {
        let mut t = Matrix4::identity();
        t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        t.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
        Self { t }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.t.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t.fixed_view::<3, 1>(0, 3).into_owned()
    }
}

pub fn poses_to_text(poses: &[Pose]) -> String {
    let mut s = String::new();
    for p in poses {
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|i| format!("{:e}", p.t[i]))
            .collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

/// Parses a KITTI pose file: one row-major 3×4 matrix per non-empty line.
/// Rotations off by more than 1e-3 are logged, more than 1e-1 rejected.
pub fn parse_poses(text: &str) -> Result<Vec<Pose>> {
    let mut poses = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let what = || format!("poses line {}", ln + 1);
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(what(), format!("bad number: {e}")))?;
        if vals.len() != 12 {
            return Err(Error::format(what(), format!("expected 12 values, got {}", vals.len())));
        }
        let t = extend_3x4(&vals);
        let err = rigidity_error(&t);
        if err > 1e-1 {
            return Err(Error::format(what(), format!("rotation is not orthonormal (error {err:.3e})")));
        } else if err > 1e-3 {
            log::warn!("{}: rotation off orthonormal by {err:.3e}", what());
        }
        poses.push(Pose { t });
    }
    Ok(poses)
}
