use nalgebra::{Matrix3x4, Matrix4};

use crate::error::{Error, Result};

/// Camera projection `P` (pixels) and the LiDAR-to-camera rigid transform `Tr`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub p: Matrix3x4<f64>,
    pub tr: Matrix4<f64>,
}

/// Largest deviation of `RᵀR` from identity, and of the bottom row from `(0,0,0,1)`.
pub fn rigidity_error(t: &Matrix4<f64>) -> f64 {
    let r = t.fixed_view::<3, 3>(0, 0);
    let ortho = (r.transpose() * r - nalgebra::Matrix3::identity()).abs().max();
    let bottom = (t.fixed_view::<1, 4>(3, 0) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0))
        .abs()
        .max();
    ortho.max(bottom)
}

pub(crate) fn extend_3x4(v: &[f64]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = v[r * 4 + c];
        }
    }
    m
}

impl CalibrationSet {
    pub fn new(p: Matrix3x4<f64>, tr: Matrix4<f64>) -> Result<Self> {
        let err = rigidity_error(&tr);
        if err > 1e-6 {
            return Err(Error::format("calib Tr", format!("not a rigid transform (error {err:.3e})")));
        }
        if p[(2, 2)] == 0.0 {
            return Err(Error::format("calib P2", "P[2][2] is zero"));
        }
        Ok(Self { p, tr })
    }

    /// Inverse of `Tr` exploiting rigidity: `[Rᵀ | -Rᵀt]`.
    pub fn tr_inverse(&self) -> Matrix4<f64> {
        rigid_inverse(&self.tr)
    }

    pub fn to_text(&self) -> String {
        let row = |vals: Vec<f64>| vals.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
        let p: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|i| self.p[i]).collect();
        let tr: Vec<f64> = (0..3).flat_map(|r| (0..4).map(move |c| (r, c))).map(|i| self.tr[i]).collect();
        format!("P2: {}\nTr: {}\n", row(p), row(tr))
    }
}

pub fn rigid_inverse(t: &Matrix4<f64>) -> Matrix4<f64> {
    let r = t.fixed_view::<3, 3>(0, 0).transpose();
    let tr = -(r * t.fixed_view::<3, 1>(0, 3));
    let mut inv = Matrix4::identity();
    inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    inv.fixed_view_mut::<3, 1>(0, 3).copy_from(&tr);
    inv
}

/// Parses a KITTI odometry `calib.txt`: `KEY: v0 … v11` lines. `P` is taken
/// from `P2`, `Tr` is extended with `(0, 0, 0, 1)`; other keys are ignored.
pub fn parse_calib(text: &str) -> Result<CalibrationSet> {
    let mut p2 = None;
    let mut tr = None;
    for line in text.lines() {
        let Some((key, rest)) = line.split_once(':') else { continue };
        let key = key.trim();
        if key != "P2" && key != "Tr" {
            continue;
        }
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(key, format!("bad number: {e}")))?;
        if vals.len() != 12 {
            return Err(Error::format(key, format!("expected 12 values, got {}", vals.len())));
        }
        if key == "P2" {
            p2 = Some(Matrix3x4::from_row_slice(&vals));
        } else {
            tr = Some(extend_3x4(&vals));
        }
    }
    let p = p2.ok_or_else(|| Error::format("P2", "missing key"))?;
    let tr = tr.ok_or_else(|| Error::format("Tr", "missing key"))?;
    CalibrationSet::new(p, tr)
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENT: &str = "1 0 0 0 0 1 0 0 0 0 1 0";

    #[test]
    fn minimal_file_round_trips() {
        let text = format!("P2: 100 0 50 0 0 100 50 0 0 0 1 0\nTr:   {IDENT}\n");
        let c = parse_calib(&text).unwrap();
        assert_eq!(c.p, Matrix3x4::from_row_slice(&[100., 0., 50., 0., 0., 100., 50., 0., 0., 0., 1., 0.]));
        assert_eq!(c.tr, Matrix4::identity());
        assert_eq!(parse_calib(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn arity_and_missing_keys() {
        let err = parse_calib(&format!("P2: {IDENT}\nTr: 1 0 0 0 0 1 0 0 0 0 1\n")).unwrap_err();
        assert!(err.to_string().contains("Tr"), "{err}");
        let err = parse_calib(&format!("Tr: {IDENT}\n")).unwrap_err();
        assert!(err.to_string().contains("P2"), "{err}");
    }

    #[test]
    fn unknown_keys_are_ignored() {
        let text = format!("P0: {IDENT}\nP1: {IDENT}\nP2: {IDENT}\nP3: {IDENT}\nTr: {IDENT}\ncalib_time: 09-Jan-2012 13:57:47\n");
        assert!(parse_calib(&text).is_ok());
    }

    #[test]
    fn non_rigid_tr_is_rejected() {
        let text = format!("P2: {IDENT}\nTr: 2 0 0 0 0 1 0 0 0 0 1 0\n");
        assert!(parse_calib(&text).is_err());
    }
}
