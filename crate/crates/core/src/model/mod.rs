//! The perception and decision network: image and point backbones,
//! reliability-gated fusion, the recurrent temporal stage and the waypoint head.

pub mod backbones;
pub mod fusion;
pub mod pipeline;
pub mod temporal;

use rand::Rng;

pub use backbones::{
    attention_block, dynamic_sample_count, fps_sample, group_and_encode, point_forward, rgb_forward, Attention,
    BranchFeatures, PointBranchConfig, RgbBranchConfig,
};
pub use fusion::{
    fuse, fusion_weights, laplacian_variance, reliability_cloud, reliability_from_count, reliability_image,
    semantic_map, FusedFeature, FusionConfig, FusionWeights, ReliabilityScores, Which, RELIABILITY_FLOOR,
};
pub use pipeline::{
    frame_loss, init_model, pipeline_step, Ablation, FrameVars, Modality, ModelConfig, StageTimes, StepOutput,
};
pub use temporal::{
    decision_forward, recurrent_step, temporal_attention, temporal_delta, GraphState, NavOutput, TemporalConfig,
    TemporalState,
};

use crate::error::Result;
use crate::numeric::{BufferStore, ParamRegistry, Tensor};
use crate::scalar::Scalar;

/// Learnable tensors and running statistics of one model instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub params: ParamRegistry<T>,
    pub buffers: BufferStore<T>,
}

/// Kaiming-uniform fan-in initialization: `U(-√(6/fan_in), √(6/fan_in))`.
pub(crate) fn kaiming<T: Scalar, R: Rng + ?Sized>(
    reg: &mut ParamRegistry<T>,
    path: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    reg.insert(path, Tensor::new(shape, data)?)?;
    Ok(())
}

pub(crate) fn zeros<T: Scalar>(reg: &mut ParamRegistry<T>, path: String, shape: &[usize]) -> Result<()> {
    reg.insert(path, Tensor::zeros(shape))?;
    Ok(())
}
