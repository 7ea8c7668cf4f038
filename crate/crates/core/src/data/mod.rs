//! KITTI-format parsing, frame assembly with derived labels, and augmentation.

mod augment;
mod calib;
mod cloud;
mod dataset;
mod image;
mod poses;

pub use augment::{apply_augmentation, augment_frame, AugmentParams, AugmentPolicy};
pub use calib::{parse_calib, rigid_inverse, rigidity_error, CalibrationSet};
pub use cloud::{parse_velodyne_bin, serialize_velodyne_bin, PointCloud};
pub use dataset::{
    assemble_dataset, assemble_sequences, derive_labels, list_sequences, load_sequence, pose_path, sequence_dir,
    write_sequence, Frame, LabelConfig, LabeledFrame, NamedSplit, Sequence, Split, FRAME_RATE_HZ,
};
pub use image::{decode_ppm, encode_ppm, load_image, Image, ImageFormat};
pub use poses::{parse_poses, poses_to_text, Pose};
