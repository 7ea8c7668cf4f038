//! KITTI odometry directory layout, frame assembly and pose-derived labels.
//!
//! ```text
//! root/sequences/NN/velodyne/000000.bin
//! root/sequences/NN/image_2/000000.ppm   (or .png with the `png` feature)
//! root/sequences/NN/calib.txt
//! root/sequences/NN/times.txt            (optional; 10 Hz assumed otherwise)
//! root/poses/NN.txt
//! ```
//!
//! Camera axes follow KITTI: x right, y down, z forward. Navigation labels use
//! `(forward, lateral) = (z, x)`.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::data::{
    decode_ppm, encode_ppm, load_image, parse_calib, parse_poses, parse_velodyne_bin, poses_to_text,
    serialize_velodyne_bin, CalibrationSet, Image, ImageFormat, PointCloud, Pose,
};
use crate::error::{Error, Result};

pub const FRAME_RATE_HZ: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: Image,
    pub cloud: PointCloud,
    pub calib: CalibrationSet,
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledFrame {
    pub frame: Frame,
    /// `(forward, lateral)` meters in the current camera frame.
    pub waypoint: [f64; 2],
    /// Translation to the next pose, in the current camera frame.
    pub ego_delta: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Waypoint = first future pose at least this far away.
    pub lookahead_m: f64,
    /// Bound on each ego-motion component.
    pub max_step: f64,
    /// Bound on each waypoint component.
    pub waypoint_range: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            lookahead_m: 5.0,
            max_step: 5.0,
            waypoint_range: 10.0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lookahead_m > 0.0 && self.max_step > 0.0 && self.waypoint_range > 0.0) {
            return Err(Error::config("labels: lookahead_m, max_step and waypoint_range must be positive"));
        }
        Ok(())
    }
}

/// Labels for frame `t`, or `None` when `t` has no successor or no pose is
/// `lookahead_m` away.
pub fn derive_labels(poses: &[Pose], cfg: &LabelConfig) -> Result<Vec<Option<([f64; 2], [f64; 3])>>> {
    let mut out = Vec::with_capacity(poses.len());
    for t in 0..poses.len() {
        if t + 1 >= poses.len() {
            out.push(None);
            continue;
        }
        let rt = poses[t].rotation().transpose();
        let pt = poses[t].translation();
        let local = |p: Vector3<f64>| rt * (p - pt);
        let d = local(poses[t + 1].translation());
        let Some(j) = (t + 1..poses.len()).find(|&j| (poses[j].translation() - pt).norm() >= cfg.lookahead_m) else {
            out.push(None);
            continue;
        };
        let q = local(poses[j].translation());
        let waypoint = [q.z, q.x];
        let ego = [d.x, d.y, d.z];
        if ego.iter().any(|x| !x.is_finite() || x.abs() > cfg.max_step) {
            return Err(Error::contract(format!(
                "frame {t}: ego-motion {ego:?} exceeds max_step {}",
                cfg.max_step
            )));
        }
        if waypoint.iter().any(|x| !x.is_finite() || x.abs() > cfg.waypoint_range) {
            return Err(Error::contract(format!(
                "frame {t}: waypoint {waypoint:?} exceeds waypoint_range {}",
                cfg.waypoint_range
            )));
        }
        out.push(Some((waypoint, ego)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedSplit {
    Train,
    Val,
    Test,
    All,
}

/// Which sequences to load: a named KITTI split or explicit sequence numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Split {
    Named(NamedSplit),
    Ids(Vec<u32>),
}

impl Split {
    pub const TRAIN: Split = Split::Named(NamedSplit::Train);
    pub const VAL: Split = Split::Named(NamedSplit::Val);
    pub const TEST: Split = Split::Named(NamedSplit::Test);

    /// Sequence numbers of the split: train 00–07 and 09–15, val 08, test 16–20.
    pub fn members(&self) -> Option<Vec<u32>> {
        match self {
            Split::Named(NamedSplit::Train) => Some((0..=7).chain(9..=15).collect()),
            Split::Named(NamedSplit::Val) => Some(vec![8]),
            Split::Named(NamedSplit::Test) => Some((16..=20).collect()),
            Split::Named(NamedSplit::All) => None,
            Split::Ids(ids) => Some(ids.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: u32,
    pub frames: Vec<LabeledFrame>,
}

pub fn sequence_dir(root: &Path, id: u32) -> PathBuf {
    root.join("sequences").join(format!("{id:02}"))
}

pub fn pose_path(root: &Path, id: u32) -> PathBuf {
    root.join("poses").join(format!("{id:02}.txt"))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Sequence numbers present under `root/sequences`.
pub fn list_sequences(root: &Path) -> Result<Vec<u32>> {
    let dir = root.join("sequences");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if let Some(id) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) {
            if entry.path().is_dir() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Loads one sequence and derives its labels.
pub fn load_sequence(root: &Path, id: u32, labels: &LabelConfig) -> Result<Sequence> {
    let dir = sequence_dir(root, id);
    let calib = parse_calib(&read_text(&dir.join("calib.txt"))?)?;
    let poses = parse_poses(&read_text(&pose_path(root, id))?)?;
    let velo = dir.join("velodyne");
    let mut scans: Vec<PathBuf> = fs::read_dir(&velo)
        .map_err(|e| Error::io(&velo, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    scans.sort();
    if scans.len() != poses.len() {
        return Err(Error::format(
            format!("sequence {id:02}"),
            format!("{} scans but {} poses", scans.len(), poses.len()),
        ));
    }
    let times_path = dir.join("times.txt");
    let times: Vec<f64> = if times_path.exists() {
        read_text(&times_path)?
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| Error::format("times.txt", e.to_string())))
            .collect::<Result<_>>()?
    } else {
        (0..poses.len()).map(|i| i as f64 / FRAME_RATE_HZ).collect()
    };
    if times.len() != poses.len() || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::format("times.txt", "timestamps must be one per frame and strictly increasing"));
    }
    let derived = derive_labels(&poses, labels)?;
    let mut frames = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let Some((waypoint, ego_delta)) = derived[i] else { continue };
        let (cloud, dropped) = parse_velodyne_bin(&read(scan)?)?;
        if dropped > 0 {
            log::debug!("{}: dropped {dropped} non-finite returns", scan.display());
        }
        let image = load_frame_image(&dir, i)?;
        frames.push(LabeledFrame {
            frame: Frame {
                index: i,
                image,
                cloud,
                calib: calib.clone(),
                pose: poses[i].clone(),
                timestamp: times[i],
            },
            waypoint,
            ego_delta,
        });
    }
    Ok(Sequence { id, frames })
}

fn load_frame_image(dir: &Path, i: usize) -> Result<Image> {
    let ppm = dir.join("image_2").join(format!("{i:06}.ppm"));
    if ppm.exists() {
        return decode_ppm(&read(&ppm)?);
    }
    let png = dir.join("image_2").join(format!("{i:06}.png"));
    if png.exists() {
        return load_image(&read(&png)?, ImageFormat::Png);
    }
    Err(Error::io(&ppm, std::io::Error::new(std::io::ErrorKind::NotFound, "no .ppm or .png image")))
}

/// Loads every sequence of `split`. Named splits take the members that exist
/// under `root`; explicit id lists must all exist.
pub fn assemble_sequences(root: &Path, split: &Split, labels: &LabelConfig) -> Result<Vec<Sequence>> {
    let present = list_sequences(root)?;
    let ids: Vec<u32> = match (split, split.members()) {
        (Split::Ids(ids), _) => ids.clone(),
        (_, Some(members)) => members.into_iter().filter(|id| present.contains(id)).collect(),
        (_, None) => present,
    };
    ids.into_iter().map(|id| load_sequence(root, id, labels)).collect()
}

/// All labeled frames of `split`, sequence by sequence.
pub fn assemble_dataset(root: &Path, split: &Split, labels: &LabelConfig) -> Result<Vec<LabeledFrame>> {
    Ok(assemble_sequences(root, split, labels)?
        .into_iter()
        .flat_map(|s| s.frames)
        .collect())
}

/// Writes raw frames (all of them, labeled or not) in the layout read by [`load_sequence`].
pub fn write_sequence(root: &Path, id: u32, frames: &[Frame]) -> Result<()> {
    let dir = sequence_dir(root, id);
    let mk = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    let write = |p: &Path, bytes: &[u8]| fs::write(p, bytes).map_err(|e| Error::io(p, e));
    mk(&dir.join("velodyne"))?;
    mk(&dir.join("image_2"))?;
    mk(&root.join("poses"))?;
    let first = frames
        .first()
        .ok_or_else(|| Error::contract(format!("sequence {id:02} has no frames")))?;
    write(&dir.join("calib.txt"), first.calib.to_text().as_bytes())?;
    let mut times = String::new();
    for f in frames {
        write(&dir.join("velodyne").join(format!("{:06}.bin", f.index)), &serialize_velodyne_bin(&f.cloud))?;
        write(&dir.join("image_2").join(format!("{:06}.ppm", f.index)), &encode_ppm(&f.image))?;
        times.push_str(&format!("{:e}\n", f.timestamp));
    }
    write(&dir.join("times.txt"), times.as_bytes())?;
    let poses: Vec<Pose> = frames.iter().map(|f| f.pose.clone()).collect();
    write(&pose_path(root, id), poses_to_text(&poses).as_bytes())
}
